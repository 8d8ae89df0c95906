"""Skeleton recordings: parsing, preprocessing, protocol splits, tensor cache.

The text grammar (whitespace separated, one record per line):

    frameCount
    per frame:  bodyCount
        per body:  10 metadata fields
                   jointCount
                   per joint: x y z depthX depthY colorX colorY
                              orientW orientX orientY orientZ trackingState

Only x, y, z are consumed; the remaining joint fields are parsed and
discarded. Sample identity (setup/camera/performer/replication/action) is
carried by the file name pattern ``SsssCcccPpppRrrrAaaa``.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, SkeletonParseError

NTU_JOINTS = 25
NUCLA_JOINTS = 20

BODY_META_FIELDS = 10
JOINT_FIELDS = 12

# Published cross-subject training performers for the 60-class corpus.
XSUB_TRAIN_SUBJECTS = frozenset(
    {1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38}
)

_FILENAME_RE = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


@dataclass
class SkeletonBody:
    meta: tuple  # the 10 tracking-metadata fields, as parsed
    joints: np.ndarray  # (V, 3) xyz in meters


@dataclass
class RawSkeletonSample:
    frames: list  # list of frames; each frame is a list of SkeletonBody
    label: int = -1
    setup: int = 0
    camera: int = 0
    subject: int = 0
    replication: int = 0
    name: str = ""

    def joint_count(self):
        for bodies in self.frames:
            if bodies:
                return bodies[0].joints.shape[0]
        return 0


@dataclass
class SkeletonTensor:
    """Preprocessed sample: (3, T, V, M) floats plus label and identity."""

    data: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PreprocessConfig:
    pad_frames: int = 300
    sample_frames: int = 150
    crop_frames: int = 128
    max_bodies: int = 2
    origin_joint: int = 1  # 0-based index of the second joint (spine mid)
    joints: int = NTU_JOINTS
    jitter: bool = False


# ---------------------------------------------------------------------------
# parsing


class _LineReader:
    def __init__(self, text):
        self._lines = text.splitlines()
        self._pos = 0

    @property
    def line_no(self):
        return self._pos

    def tokens(self):
        while self._pos < len(self._lines):
            line = self._lines[self._pos]
            self._pos += 1
            parts = line.split()
            if parts:
                return parts, self._pos
        raise SkeletonParseError("unexpected end of file", line=self._pos + 1)


def _as_int(token, line, what):
    try:
        return int(token)
    except ValueError:
        raise SkeletonParseError(f"non-numeric {what} {token!r}", line=line) from None


def _as_float(token, line, what):
    try:
        return float(token)
    except ValueError:
        raise SkeletonParseError(f"non-numeric {what} {token!r}", line=line) from None


def parse_ntu_skeleton(source, name=""):
    """Parse a skeleton recording from text, bytes, or a readable stream."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    else:
        raise ContractError(f"unsupported source type {type(source)!r}")

    reader = _LineReader(text)
    toks, line = reader.tokens()
    frame_count = _as_int(toks[0], line, "frame count")
    if frame_count < 1:
        raise SkeletonParseError(f"frame count must be >= 1, got {frame_count}", line=line)

    declared_joints = None
    frames = []
    for _ in range(frame_count):
        toks, line = reader.tokens()
        body_count = _as_int(toks[0], line, "body count")
        bodies = []
        for _ in range(body_count):
            toks, line = reader.tokens()
            if len(toks) != BODY_META_FIELDS:
                raise SkeletonParseError(
                    f"expected {BODY_META_FIELDS} body-metadata fields, got {len(toks)}",
                    line=line,
                )
            meta = tuple(_as_float(t, line, "body metadata") for t in toks)
            toks, line = reader.tokens()
            joint_count = _as_int(toks[0], line, "joint count")
            if declared_joints is None:
                declared_joints = joint_count
            elif joint_count != declared_joints:
                raise SkeletonParseError(
                    f"joint count {joint_count} differs from earlier {declared_joints}",
                    line=line,
                )
            joints = np.zeros((joint_count, 3))
            for j in range(joint_count):
                toks, line = reader.tokens()
                if len(toks) != JOINT_FIELDS:
                    raise SkeletonParseError(
                        f"expected {JOINT_FIELDS} joint fields, got {len(toks)}",
                        line=line,
                    )
                values = [_as_float(t, line, "joint field") for t in toks]
                joints[j] = values[:3]  # remaining fields discarded
            bodies.append(SkeletonBody(meta=meta, joints=joints))
        frames.append(bodies)

    sample = RawSkeletonSample(frames=frames, name=name)
    ids = parse_ntu_filename(name)
    if ids is not None:
        sample.setup = ids["setup"]
        sample.camera = ids["camera"]
        sample.subject = ids["subject"]
        sample.replication = ids["replication"]
        sample.label = ids["label"]
    return sample


def write_ntu_skeleton(sample):
    """Serialize a sample back to the text grammar (discarded fields as 0)."""
    out = [str(len(sample.frames))]
    for bodies in sample.frames:
        out.append(str(len(bodies)))
        for body in bodies:
            out.append(" ".join(repr(float(v)) for v in body.meta))
            out.append(str(body.joints.shape[0]))
            for joint in body.joints:
                fields = [repr(float(v)) for v in joint] + ["0.0"] * (JOINT_FIELDS - 3)
                out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def parse_ntu_filename(name):
    """Extract setup/camera/performer/replication/action ids; None if absent.

    The action label is the integer after 'A' minus 1.
    """
    m = _FILENAME_RE.search(name or "")
    if m is None:
        return None
    setup, camera, subject, repl, action = (int(g) for g in m.groups())
    return {
        "setup": setup,
        "camera": camera,
        "subject": subject,
        "replication": repl,
        "label": action - 1,
    }


def load_nucla_json(source, name=""):
    """Load the 20-joint JSON layout:
    {"label": int, "camera": int, "subject": int, "frames": [[[x,y,z]*20]*T]}.
    """
    looks_like_path = isinstance(source, Path) or (
        isinstance(source, str) and "{" not in source and len(source) < 4096
    )
    if looks_like_path:
        text = Path(source).read_text()
        name = name or Path(source).name
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc}") from None
    for key in ("label", "camera", "subject", "frames"):
        if key not in doc:
            raise DataError(f"missing key {key!r}")
    frames = []
    for t, joints in enumerate(doc["frames"]):
        arr = np.asarray(joints, dtype=np.float64)
        if arr.shape != (NUCLA_JOINTS, 3):
            raise DataError(
                f"frame {t}: expected ({NUCLA_JOINTS}, 3) joints, got {arr.shape}"
            )
        frames.append([SkeletonBody(meta=(0.0,) * BODY_META_FIELDS, joints=arr)])
    if not frames:
        raise DataError("sample has no frames")
    return RawSkeletonSample(
        frames=frames,
        label=int(doc["label"]),
        camera=int(doc["camera"]),
        subject=int(doc["subject"]),
        name=name,
    )


# ---------------------------------------------------------------------------
# preprocessing pipeline


def uniform_sample(t_in, t_target):
    """Evenly spaced frame indices: indices[i] = floor(i * t_in / t_target)."""
    if t_in < 1 or t_target < 1:
        raise ContractError("uniform_sample requires positive extents")
    return [i * t_in // t_target for i in range(t_target)]


def uniform_sample_jittered(t_in, t_target, rng):
    """Training-time variant: each index jittered inside its stride."""
    if t_in < 1 or t_target < 1:
        raise ContractError("uniform_sample requires positive extents")
    u = rng.random(t_target)
    idx = np.floor((np.arange(t_target) + u) * t_in / t_target).astype(int)
    return np.minimum(idx, t_in - 1).tolist()


def center_crop(t_in, t_target):
    """Central window (start, end) with start = floor((t_in - t_target)/2)."""
    if t_in < t_target:
        raise ContractError(f"cannot crop {t_in} frames to {t_target}")
    start = (t_in - t_target) // 2
    return start, start + t_target


def normalize_origin(sample, origin_joint=1):
    """Translate the whole sequence so one reference joint sits at the origin.

    The reference is joint ``origin_joint`` of the first body in the first
    frame where a body is present; its offset is subtracted from every joint
    of every body in every frame (a single fixed translation).
    """
    ref = None
    for bodies in sample.frames:
        if bodies:
            ref = bodies[0]
            break
    if ref is None:
        raise ContractError("no body present in any frame")
    if not 0 <= origin_joint < ref.joints.shape[0]:
        raise ContractError(
            f"origin joint {origin_joint} out of range for {ref.joints.shape[0]} joints"
        )
    offset = ref.joints[origin_joint].copy()
    frames = [
        [SkeletonBody(meta=b.meta, joints=b.joints - offset) for b in bodies]
        for bodies in sample.frames
    ]
    return replace(sample, frames=frames)


def preprocess(sample, cfg, rng=None):
    """Raw sample to a dense (3, crop, V, M) tensor.

    Pipeline order: zero-pad frames to ``pad_frames``, sample ``sample_frames``
    uniformly, centrally crop to ``crop_frames``, zero-pad bodies to
    ``max_bodies``, then shift so the reference joint of the first present
    body sits at the origin. Absent frames/bodies stay exactly zero. Inputs
    longer than ``pad_frames`` are sampled from their full length.
    """
    v = cfg.joints
    if sample.joint_count() not in (0, v):
        raise ContractError(
            f"sample has {sample.joint_count()} joints, config expects {v}"
        )
    n_frames = len(sample.frames)
    t_eff = max(n_frames, cfg.pad_frames)
    if cfg.jitter and rng is not None:
        indices = uniform_sample_jittered(t_eff, cfg.sample_frames, rng)
    else:
        indices = uniform_sample(t_eff, cfg.sample_frames)
    start, end = center_crop(cfg.sample_frames, cfg.crop_frames)
    kept = indices[start:end]

    m_max = cfg.max_bodies
    data = np.zeros((3, cfg.crop_frames, v, m_max))
    present = np.zeros((cfg.crop_frames, m_max), dtype=bool)
    for t_out, src in enumerate(kept):
        if src >= n_frames:
            continue
        for m, body in enumerate(sample.frames[src][:m_max]):
            data[:, t_out, :, m] = body.joints.T
            present[t_out, m] = True

    # Origin shift applies only to present bodies so padding stays zero; a
    # clip whose real frames were all cropped away is left as zeros.
    slot_seen = present.any(axis=0)
    if slot_seen.any():
        ref_slot = int(np.argmax(slot_seen))
        ref_t = int(np.argmax(present[:, ref_slot]))
        offset = data[:, ref_t, cfg.origin_joint, ref_slot].copy()
        for m in range(m_max):
            mask = present[:, m].astype(np.float64)
            data[:, :, :, m] -= offset[:, None, None] * mask[None, :, None]

    meta = {
        "name": sample.name,
        "setup": sample.setup,
        "camera": sample.camera,
        "subject": sample.subject,
        "replication": sample.replication,
    }
    return SkeletonTensor(data=data, label=sample.label, meta=meta)


# ---------------------------------------------------------------------------
# protocol splits


def split_protocol(samples, protocol):
    """Partition into (train, test) by the named evaluation protocol."""
    train, test = [], []
    for s in samples:
        meta = s.meta if isinstance(s, SkeletonTensor) else s
        if protocol == "xsub":
            if "subject" not in meta:
                raise ContractError("xsub split needs subject metadata")
            bucket = train if meta["subject"] in XSUB_TRAIN_SUBJECTS else test
        elif protocol == "xview":
            if "camera" not in meta:
                raise ContractError("xview split needs camera metadata")
            bucket = train if meta["camera"] in (2, 3) else test
        elif protocol == "nucla-cam":
            if "camera" not in meta:
                raise ContractError("nucla-cam split needs camera metadata")
            bucket = train if meta["camera"] in (1, 2) else test
        else:
            raise ContractError(f"unknown protocol {protocol!r}")
        bucket.append(s)
    return train, test


# ---------------------------------------------------------------------------
# cached tensor format

CACHE_MAGIC = b"ACTC1"


def save_tensor(st, path):
    """Write magic, shape (4 x u32 LE), label (i32 LE), then f64 LE data."""
    if st.data.ndim != 4:
        raise ContractError(f"cached tensors are 4-d, got shape {st.data.shape}")
    payload = (
        CACHE_MAGIC
        + struct.pack("<4I", *st.data.shape)
        + struct.pack("<i", int(st.label))
        + np.ascontiguousarray(st.data, dtype="<f8").tobytes()
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_tensor(path):
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic, not a cached tensor")
    off = len(CACHE_MAGIC)
    shape = struct.unpack_from("<4I", blob, off)
    off += 16
    (label,) = struct.unpack_from("<i", blob, off)
    off += 4
    count = int(np.prod(shape))
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
    if data.size != count:
        raise DataError(f"{path}: truncated data section")
    meta = {"name": path.name}
    ids = parse_ntu_filename(path.name)
    if ids is not None:
        meta.update({k: ids[k] for k in ("setup", "camera", "subject", "replication")})
    return SkeletonTensor(
        data=data.reshape(shape).astype(np.float64), label=label, meta=meta
    )


def load_dataset_dir(directory, suffix=".actc"):
    """Load every cached tensor under a directory, in sorted name order."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix == suffix)
    if not files:
        raise DataError(f"{directory}: no {suffix} files found")
    return [load_tensor(p) for p in files]
