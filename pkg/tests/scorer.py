"""Brute-force CMC / mAP reference written from the definitions.

Deliberately loop based and independent of the package's ranking code.
"""

import math


def brute_force_scores(Q, q_ids, q_cams, G, g_ids, g_cams, max_rank=20):
    nq, ng = len(Q), len(G)
    hits = [0] * max_rank
    aps = []
    for i in range(nq):
        sims = []
        for j in range(ng):
            s = sum(float(Q[i][k]) * float(G[j][k]) for k in range(len(Q[i])))
            sims.append((-s, j))
        sims.sort()
        correct_seen = 0
        position = 0
        precisions = []
        first = None
        for _, j in sims:
            if g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]:
                continue
            position += 1
            if g_ids[j] == q_ids[i] and g_ids[j] != -1:
                correct_seen += 1
                precisions.append(correct_seen / position)
                if first is None:
                    first = position
        if first is None:
            continue
        for r in range(first - 1, max_rank):
            hits[r] += 1
        aps.append(sum(precisions) / len(precisions))
    n = len(aps)
    return [h / n for h in hits], (sum(aps) / n if n else math.nan), n
