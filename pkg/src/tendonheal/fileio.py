"""On-disk formats: PGM slices, phantom datasets and model checkpoints.

Dataset layout (``format_version`` 1)::

    root/
      manifest.json          subjects, exams and their slice files
      scores.csv             subject_id,timepoint,SCT,TT,STE,TE,TU,TisE
      slices/<subject>/<plane>/t<timepoint>/s<index>.pgm   8-bit binary P5
      slices/<subject>/<plane>/t<timepoint>/s<index>.json  slice sidecar

Pixels are stored as ``floor(intensity * 255 + 0.5)`` and read back as
``value / maxval``; that quantization is the only lossy step.

Checkpoint layout::

    b"TNDHCKPT"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON (sorted keys)
    32 bytes                    SHA-256 of the header bytes
    payload                     float64 little-endian arrays, in header order

The header carries ``format_version``, the model config, seed, training
summary, the ``arrays`` list (name, shape, nbytes) and ``payload_sha256``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .models import PLANES, TARGETS, Model, ModelConfig
from .phantom import HEALTHY_TIMEPOINT, Exam, HealingState, SliceImage, exam_id
from .tensor import Tensor

DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"TNDHCKPT"
SCORES_HEADER = ["subject_id", "timepoint", *TARGETS]
N_TIMEPOINTS = 10


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def dumps_json(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


# --------------------------------------------------------------------------
# PGM


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a [0, 1] float image as binary 8-bit PGM (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {pixels.shape}")
    data = pixels if pixels.dtype == np.uint8 else quantize(pixels)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 PGM into floats in [0, 1]."""
    data = Path(path).read_bytes()
    try:
        tokens, offset = _pgm_tokens(data, 4)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * dtype.itemsize
    body = data[offset : offset + expected]
    if len(body) != expected:
        raise ValueError(f"{path}: PGM payload has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.float64) / maxval


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    root: Path
    format_version: int
    subjects: list[tuple[str, str]]
    exams: list[Exam]
    slice_files: dict[str, list[str]] = field(default_factory=dict)
    generator: dict = field(default_factory=dict)

    def by_plane(self, plane: str) -> list[Exam]:
        return [e for e in self.exams if e.plane == plane]

    @property
    def planes(self) -> list[str]:
        return [p for p in PLANES if any(e.plane == p for e in self.exams)]


def _slice_relpath(patient_id: str, plane: str, timepoint: int, index: int) -> str:
    return f"slices/{patient_id}/{plane}/t{timepoint}/s{index:03d}"


def write_scores(path: Path, rows: Iterable[tuple[str, int, HealingState]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    for subject, tp, state in rows:
        writer.writerow([subject, tp, *(repr(float(v)) for v in state.as_array())])
    path.write_text(buf.getvalue())


def write_dataset(exams: list[Exam], root: str | Path, generator: dict | None = None) -> Path:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc.strerror or exc}") from exc

    subjects: dict[str, str] = {}
    truth: dict[tuple[str, int], HealingState] = {}
    records = []
    for exam in exams:
        subjects.setdefault(exam.patient_id, exam.kind)
        truth.setdefault((exam.patient_id, exam.timepoint), exam.ground_truth)
        files = []
        for s in exam.slices:
            rel = _slice_relpath(exam.patient_id, exam.plane, exam.timepoint, s.slice_index)
            target = root / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            write_pgm(target.with_suffix(".pgm"), s.pixels)
            sidecar = {
                "patient_id": s.patient_id,
                "plane": s.plane,
                "timepoint": s.timepoint,
                "slice_index": s.slice_index,
                "seed": s.seed,
            }
            target.with_suffix(".json").write_text(dumps_json(sidecar))
            files.append(rel + ".pgm")
        records.append(
            {
                "exam_id": exam.exam_id,
                "subject_id": exam.patient_id,
                "timepoint": exam.timepoint,
                "plane": exam.plane,
                "slices": files,
            }
        )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "generator": generator or {},
        "subjects": [{"subject_id": k, "kind": v} for k, v in subjects.items()],
        "exams": records,
    }
    (root / "manifest.json").write_text(dumps_json(manifest))
    write_scores(root / "scores.csv", ((s, tp, st) for (s, tp), st in truth.items()))
    return root


def read_scores(path: Path) -> dict[tuple[str, int], HealingState]:
    if not path.exists():
        raise DatasetError(f"{path}: ground-truth table not found")
    rows: dict[tuple[str, int], HealingState] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise DatasetError(f"{path}:1: expected header {','.join(SCORES_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SCORES_HEADER):
                raise DatasetError(f"{path}:{line_no}: expected {len(SCORES_HEADER)} fields, got {len(row)}")
            try:
                tp = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: malformed number in {row}") from None
            for name, value in zip(TARGETS, values):
                if not 1.0 <= value <= 7.0:
                    raise DatasetError(f"{path}:{line_no}: score {name}={value} outside [1, 7]")
            key = (row[0], tp)
            if key in rows:
                raise DatasetError(f"{path}:{line_no}: duplicate row for subject {row[0]} timepoint {tp}")
            rows[key] = HealingState.from_array(values)
    return rows


def load_dataset(root: str | Path) -> DatasetManifest:
    """Load and validate a dataset directory; every slice is parsed eagerly."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"{manifest_path}: format_version {version!r} unsupported (expected {DATASET_FORMAT_VERSION})"
        )
    truth = read_scores(root / "scores.csv")
    subjects = [(s["subject_id"], s["kind"]) for s in manifest.get("subjects", [])]
    kinds = dict(subjects)
    exams: list[Exam] = []
    files: dict[str, list[str]] = {}
    seen: set[str] = set()
    for rec in manifest.get("exams", []):
        sid, tp, plane = rec["subject_id"], int(rec["timepoint"]), rec["plane"]
        eid = exam_id(sid, tp, plane)
        if eid in seen:
            raise DatasetError(f"{manifest_path}: duplicate exam {eid}")
        seen.add(eid)
        if sid not in kinds:
            raise DatasetError(f"{manifest_path}: exam {eid} references unknown subject {sid}")
        if plane not in PLANES:
            raise DatasetError(f"{manifest_path}: exam {eid} has unknown plane {plane!r}")
        if (sid, tp) not in truth:
            raise DatasetError(f"{root / 'scores.csv'}: no ground-truth row for exam {eid}")
        slices = []
        for index, rel in enumerate(rec["slices"]):
            path = root / rel
            if not path.exists():
                raise DatasetError(f"{manifest_path}: slice file {path} does not exist")
            try:
                pixels = read_pgm(path)
            except ValueError as exc:
                raise DatasetError(str(exc)) from None
            sidecar_path = path.with_suffix(".json")
            meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
            slices.append(
                SliceImage(pixels, plane, sid, tp, int(meta.get("slice_index", index)), int(meta.get("seed", 0)))
            )
        if not slices:
            raise DatasetError(f"{manifest_path}: exam {eid} has no slices")
        exams.append(Exam(sid, tp, plane, slices, truth[(sid, tp)]))
        files[eid] = list(rec["slices"])
    _check_schedule(manifest_path, kinds, exams)
    return DatasetManifest(root, version, subjects, exams, files, manifest.get("generator", {}))


def _check_schedule(path: Path, kinds: dict[str, str], exams: list[Exam]) -> None:
    timepoints: dict[tuple[str, str], list[int]] = {}
    for exam in exams:
        timepoints.setdefault((exam.patient_id, exam.plane), []).append(exam.timepoint)
        if kinds[exam.patient_id] == "healthy" and not np.all(exam.ground_truth.as_array() == 1.0):
            raise DatasetError(f"{path}: healthy subject {exam.patient_id} has non-healthy ground truth")
    for (sid, plane), tps in timepoints.items():
        if kinds[sid] == "patient" and sorted(tps) != list(range(N_TIMEPOINTS)):
            raise DatasetError(f"{path}: patient {sid} ({plane}) must have timepoints 0..9, has {sorted(tps)}")
        if kinds[sid] == "healthy" and tps != [HEALTHY_TIMEPOINT]:
            raise DatasetError(f"{path}: healthy subject {sid} ({plane}) must have exactly one exam at t=-1")


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    arrays, chunks = [], []
    for name, tensor in model.params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        arrays.append({"name": name, "shape": list(tensor.shape), "nbytes": len(raw)})
        chunks.append(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "training": model.training,
        "arrays": arrays,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + hashlib.sha256(head).digest() + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def load_checkpoint(path: str | Path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    head = blob[16 : 16 + head_len]
    digest = blob[16 + head_len : 48 + head_len]
    if len(head) != head_len or len(digest) != 32:
        raise CheckpointError(f"{path}: checksum error (file truncated inside the header)")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: checksum error (header is not valid JSON)") from None
    version = header.get("format_version") if isinstance(header, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format_version {version!r} is not supported by this build "
            f"(expected {CHECKPOINT_FORMAT_VERSION}); re-save the model with a matching version"
        )
    if hashlib.sha256(head).digest() != digest:
        raise CheckpointError(f"{path}: checksum error (header hash mismatch)")
    payload = blob[48 + head_len :]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: checksum error (payload has {len(payload)} bytes, expected {expected})")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum error (payload hash mismatch)")
    config = ModelConfig.from_dict(header["config"])
    shapes = config.parameter_shapes()
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in header["arrays"]:
        name, shape, nbytes = entry["name"], tuple(entry["shape"]), entry["nbytes"]
        if shapes.get(name) != shape:
            raise CheckpointError(f"{path}: array {name} has shape {shape}, config implies {shapes.get(name)}")
        data = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
        offset += nbytes
    if set(params) != set(shapes):
        raise CheckpointError(f"{path}: parameters {sorted(set(shapes) - set(params))} missing")
    return Model(config=config, params={k: params[k] for k in shapes}, seed=header["seed"], training=header["training"])
