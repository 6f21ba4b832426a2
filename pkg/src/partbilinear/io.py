"""On-disk formats: feature maps, manifests, embeddings, rankings, reports.

Feature file layout (little endian)::

    offset  size  field
    0       8     magic b"PABRFMAP"
    8       2     version (uint16)
    10      1     role (0 appearance, 1 part, 2 raw)
    11      12    h, w, c (uint32 each)
    23      4*hwc float32 payload, row-major (y, x, channel)
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import DatasetManifest, FeatureMap, ImageSample, ManifestEntry, Role, validate_map
from .errors import CorruptionError, FormatError, ValidationError
from .evaluation import EvalReport, LabeledEmbeddings
from .matching import RankedResult

MAGIC = b"PABRFMAP"
VERSION = 1
HEADER = struct.Struct("<8sHB3I")
HEADER_SIZE = HEADER.size  # 23

MANIFEST_FIELDS = ("sample_id", "identity", "camera", "appearance_path", "part_path", "split")
REPORT_FIELDS = ("rank1", "rank5", "rank10", "rank20", "mAP")


def encode_feature_map(fmap: FeatureMap) -> bytes:
    problems = validate_map(fmap)
    if problems:
        raise ValidationError("refusing to write invalid map: " + "; ".join(p.detail for p in problems), problems)
    with np.errstate(over="ignore"):
        payload = fmap.data.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError("values overflow 32-bit storage")
    h, w, c = fmap.shape
    return HEADER.pack(MAGIC, VERSION, int(fmap.role), h, w, c) + payload.tobytes(order="C")


def decode_feature_map(buf: bytes) -> FeatureMap:
    if len(buf) < HEADER_SIZE:
        raise CorruptionError(
            f"header truncated at byte offset {len(buf)} (need {HEADER_SIZE})", len(buf), HEADER_SIZE
        )
    magic, version, role, h, w, c = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    try:
        role = Role(role)
    except ValueError:
        raise FormatError(f"unknown role code {role}") from None
    expected = HEADER_SIZE + 4 * h * w * c
    if len(buf) < expected:
        raise CorruptionError(
            f"payload truncated at byte offset {len(buf)}; expected {expected} bytes", len(buf), expected
        )
    if len(buf) > expected:
        raise CorruptionError(
            f"{len(buf) - expected} trailing bytes after payload ending at byte offset {expected}",
            expected, expected,
        )
    values = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=HEADER_SIZE)
    return FeatureMap.from_flat(h, w, c, values.astype(np.float64), role)


def write_feature_file(fmap: FeatureMap, path) -> None:
    data = encode_feature_map(fmap)
    with open(path, "wb") as fh:
        fh.write(data)


def read_feature_file(path) -> FeatureMap:
    with open(path, "rb") as fh:
        return decode_feature_map(fh.read())


# -- manifest ----------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest:
            writer.writerow([e.sample_id, e.identity, e.camera, e.appearance_path, e.part_path, e.split.value])


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: manifest header must be {MANIFEST_FIELDS}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            sid, ident, cam, app, part, split = row
            try:
                entries.append(ManifestEntry(sid, int(ident), int(cam), app, part, split))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return DatasetManifest(tuple(entries), str(path.parent))


def load_sample(entry: ManifestEntry, root=".") -> ImageSample:
    return ImageSample(
        entry.sample_id, entry.identity, entry.camera,
        read_feature_file(os.path.join(root, entry.appearance_path)),
        read_feature_file(os.path.join(root, entry.part_path)),
    )


def load_samples(manifest: DatasetManifest) -> List[ImageSample]:
    return [load_sample(e, manifest.root) for e in manifest]


def write_dataset(samples: Sequence[ImageSample], splits: Sequence, out_dir) -> DatasetManifest:
    """Write every sample's maps under ``out_dir/maps`` plus ``out_dir/manifest.tsv``."""
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    entries = []
    for s, split in zip(samples, splits):
        app = f"maps/{s.sample_id}_app.fmap"
        part = f"maps/{s.sample_id}_part.fmap"
        write_feature_file(s.appearance_map, out_dir / app)
        write_feature_file(s.part_map, out_dir / part)
        entries.append(ManifestEntry(s.sample_id, s.identity, s.camera, app, part, split))
    manifest = DatasetManifest(tuple(entries), str(out_dir))
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# -- embeddings, rankings, reports --------------------------------------------


def save_embeddings(path, emb: LabeledEmbeddings, layout: str = "", splits: Sequence[str] = None) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            features=emb.features,
            identities=emb.identities,
            cameras=emb.cameras,
            sample_ids=np.array(emb.sample_ids, dtype=str),
            splits=np.array(splits if splits is not None else [""] * len(emb), dtype=str),
            layout=np.array(layout),
        )


def load_embeddings(path) -> Tuple[LabeledEmbeddings, List[str], str]:
    try:
        with np.load(path, allow_pickle=False) as z:
            emb = LabeledEmbeddings(z["features"], z["identities"], z["cameras"],
                                    tuple(z["sample_ids"].tolist()))
            return emb, z["splits"].tolist(), str(z["layout"])
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not an embeddings file ({exc})") from None


def write_rankings(rankings: Sequence[RankedResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("query_id", "rank", "gallery_id", "similarity"))
        for r in rankings:
            for i, (gid, sim) in enumerate(zip(r.ordering, r.similarities), start=1):
                writer.writerow((r.query_id, i, gid, repr(float(sim))))


def read_rankings(path) -> List[RankedResult]:
    grouped: Dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["query_id", "rank", "gallery_id", "similarity"]:
            raise FormatError(f"{path}: not a rankings file")
        for row in reader:
            if len(row) != 4:
                raise FormatError(f"{path}: malformed row {row}")
            grouped.setdefault(row[0], []).append((int(row[1]), row[2], float(row[3])))
    out = []
    for qid, rows in grouped.items():
        rows.sort()
        out.append(RankedResult(qid, [g for _, g, _ in rows], [s for _, _, s in rows]))
    return out


def write_report(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
        fh.write("\n")


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "loss", "lr"))
        for it, loss, lr in history:
            writer.writerow((it, repr(float(loss)), repr(float(lr))))
