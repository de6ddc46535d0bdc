"""Procedural moving-shapes corpus covering all six task families.

The world is a closed enumeration (shape, color, motion, background, size), so
captions, edit instructions and QA answers are exact by construction and every
sample can re-validate itself. Start positions are a deterministic function of
(motion, size) plus a small seed-chosen jitter, which makes a caption almost
fully determine its video.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sequence import DecodeError

CANVAS = 32

SHAPES = ("circle", "square", "triangle")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0), "yellow": (1.0, 1.0, 0.0)}
MOTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "static": (0, 0)}
BACKGROUNDS = {"gray": 0.5, "white": 1.0, "black": 0.0}
SIZES = {"small": 4, "large": 7}

COLOR_NAMES = tuple(COLORS)
MOTION_NAMES = tuple(MOTIONS)
BACKGROUND_NAMES = tuple(BACKGROUNDS)
SIZE_NAMES = tuple(SIZES)

TASKS = ("image_understanding", "video_understanding", "text_to_image",
         "text_to_video", "image_edit", "video_edit")
# mixture weights, percent
TASK_RATIOS = (37.9, 4.36, 33.05, 3.97, 18.95, 1.76)

_JITTER = (-2, 0, 2)


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    background: str
    size: str
    seed: int = 0
    has_object: bool = True

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.motion not in MOTIONS \
                or self.background not in BACKGROUNDS or self.size not in SIZES:
            raise SynthError(f"invalid scene spec {self}")

    def without_object(self) -> "SceneSpec":
        return dataclasses.replace(self, has_object=False)

    def key(self) -> tuple:
        return (self.shape, self.color, self.motion, self.background, self.size, self.seed, self.has_object)


def random_spec(rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        shape=str(rng.choice(SHAPES)),
        color=str(rng.choice(COLOR_NAMES)),
        motion=str(rng.choice(MOTION_NAMES)),
        background=str(rng.choice(BACKGROUND_NAMES)),
        size=str(rng.choice(SIZE_NAMES)),
        seed=int(rng.integers(0, 2**31)),
    )


# -- rendering ------------------------------------------------------------------


def start_position(spec: SceneSpec) -> tuple[int, int]:
    """(col, row) of the shape center in frame 0."""
    vx, vy = MOTIONS[spec.motion]
    jr = np.random.default_rng(spec.seed)
    jx = int(jr.choice(_JITTER))
    jy = int(jr.choice(_JITTER))
    return (CANVAS // 2 - 6 * vx + jx, CANVAS // 2 - 6 * vy + jy)


def _center_at(spec: SceneSpec, frame: int, clamp_r: int) -> tuple[int, int, bool]:
    vx, vy = MOTIONS[spec.motion]
    x0, y0 = start_position(spec)
    cx, cy = x0 + vx * frame, y0 + vy * frame
    clamped = False
    lo, hi = clamp_r, CANVAS - 1 - clamp_r
    if not lo <= cx <= hi:
        cx = min(max(cx, lo), hi)
        clamped = True
    if not lo <= cy <= hi:
        cy = min(max(cy, lo), hi)
        clamped = True
    return cx, cy, clamped


_SUBSAMPLE = 4


def coverage(spec: SceneSpec, frame: int, *, start: tuple[int, int] | None = None) -> np.ndarray:
    """Float [CANVAS, CANVAS] per-pixel shape coverage in [0, 1].

    Rasterization is anti-aliased by 4x4 subpixel sampling; edges are one-pixel
    ramps, deterministic per (spec, frame)."""
    if not spec.has_object:
        return np.zeros((CANVAS, CANVAS), dtype=np.float32)
    r = SIZES[spec.size]
    if start is None:
        cx, cy, _ = _center_at(spec, frame, r)
    else:
        vx, vy = MOTIONS[spec.motion]
        cx, cy = start[0] + vx * frame, start[1] + vy * frame
    n = CANVAS * _SUBSAMPLE
    yy, xx = np.mgrid[0:n, 0:n]
    fx = (xx + 0.5) / _SUBSAMPLE - 0.5 - cx
    fy = (yy + 0.5) / _SUBSAMPLE - 0.5 - cy
    if spec.shape == "circle":
        m = fx * fx + fy * fy <= r * r
    elif spec.shape == "square":
        m = (np.abs(fx) <= r) & (np.abs(fy) <= r)
    else:
        # upward triangle: apex at cy - r, base at cy + r
        m = (np.abs(fy) <= r) & (np.abs(fx) <= (fy + r) / 2.0)
    return m.reshape(CANVAS, _SUBSAMPLE, CANVAS, _SUBSAMPLE).mean(axis=(1, 3)).astype(np.float32)


def shape_mask(spec: SceneSpec, frame: int, *, start: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean influence mask: every pixel the shape touches at all."""
    return coverage(spec, frame, start=start) > 0


def core_mask(spec: SceneSpec, frame: int, *, start: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean mask of fully covered (pure shape color) pixels."""
    return coverage(spec, frame, start=start) >= 1.0


def render_with_meta(spec: SceneSpec, frames: int, *, start: tuple[int, int] | None = None):
    """Rasterize to float32 [frames, 3, CANVAS, CANVAS] in [0, 1]."""
    if frames < 1:
        raise SynthError(f"frames must be >= 1, got {frames}")
    bg = BACKGROUNDS[spec.background]
    color = np.array(COLORS[spec.color], dtype=np.float32).reshape(3, 1, 1)
    video = np.full((frames, 3, CANVAS, CANVAS), bg, dtype=np.float32)
    clamped = False
    if spec.has_object:
        r = SIZES[spec.size]
        for t in range(frames):
            if start is None:
                _, _, cl = _center_at(spec, t, r)
                clamped = clamped or cl
            cov = coverage(spec, t, start=start)[None]
            video[t] = video[t] * (1.0 - cov) + color * cov
    return video, {"clamped": clamped}


def render(spec: SceneSpec, frames: int, *, start: tuple[int, int] | None = None) -> np.ndarray:
    return render_with_meta(spec, frames, start=start)[0]


# -- language -------------------------------------------------------------------


def caption(spec: SceneSpec, style: str = "detailed") -> str:
    if not spec.has_object:
        raise SynthError("cannot caption a background-only scene")
    if style == "short":
        return f"{spec.color} {spec.shape} {spec.motion}"
    if style == "detailed":
        return (f"a {spec.size} {spec.color} {spec.shape} on a {spec.background} "
                f"background moving {spec.motion}")
    raise SynthError(f"unknown caption style {style!r}")


def parse_caption(text: str) -> dict:
    """Scan for attribute words; returns whichever enum fields are present."""
    words = set(text.replace(".", " ").replace(",", " ").lower().split())
    found = {}
    for field, names in (("shape", SHAPES), ("color", COLOR_NAMES), ("motion", MOTION_NAMES),
                         ("background", BACKGROUND_NAMES), ("size", SIZE_NAMES)):
        hits = [n for n in names if n in words]
        if len(hits) == 1:
            found[field] = hits[0]
    return found


QUESTIONS = ("color", "shape", "motion", "background")


def make_qa(spec: SceneSpec, which: str | None = None, rng: np.random.Generator | None = None) -> tuple[str, str]:
    if which is None:
        which = str((rng or np.random.default_rng(spec.seed)).choice(QUESTIONS))
    if which == "color":
        return f"what color is the {spec.shape}?", spec.color
    if which == "shape":
        return "what shape is it?", spec.shape
    if which == "motion":
        return "which direction does it move?", spec.motion
    if which == "background":
        return "what is the background?", spec.background
    raise SynthError(f"unknown question kind {which!r}")


# -- editing --------------------------------------------------------------------


@dataclass(frozen=True)
class Recolor:
    new_color: str


@dataclass(frozen=True)
class RemoveObject:
    pass


@dataclass(frozen=True)
class ChangeBackground:
    new_background: str


@dataclass(frozen=True)
class AddObject:
    pass


EditOp = Recolor | RemoveObject | ChangeBackground | AddObject


@dataclass
class EditPair:
    spec: SceneSpec
    op: EditOp
    source: np.ndarray
    instruction: str
    target: np.ndarray
    preserved_mask: np.ndarray  # bool [T, CANVAS, CANVAS], True where output must match source
    edited_spec: SceneSpec


def random_edit_op(spec: SceneSpec, rng: np.random.Generator) -> EditOp:
    kind = rng.choice(["recolor", "remove", "background", "add"])
    if kind == "recolor":
        choices = [c for c in COLOR_NAMES if c != spec.color]
        return Recolor(str(rng.choice(choices)))
    if kind == "remove":
        return RemoveObject()
    if kind == "background":
        choices = [b for b in BACKGROUND_NAMES if b != spec.background]
        return ChangeBackground(str(rng.choice(choices)))
    return AddObject()


def make_edit_pair(spec: SceneSpec, op: EditOp, frames: int) -> EditPair:
    if not spec.has_object:
        raise SynthError("edit pairs are built from a scene with an object")
    masks = np.stack([shape_mask(spec, t) for t in range(frames)])
    if isinstance(op, Recolor):
        if op.new_color == spec.color:
            raise SynthError("recolor target equals the current color")
        edited = dataclasses.replace(spec, color=op.new_color)
        source = render(spec, frames)
        target = render(edited, frames)
        instruction = f"recolor the {spec.shape} to {op.new_color}"
        preserved = ~masks
    elif isinstance(op, RemoveObject):
        edited = spec.without_object()
        source = render(spec, frames)
        target = render(edited, frames)
        instruction = f"remove the {spec.shape}"
        preserved = ~masks
    elif isinstance(op, ChangeBackground):
        if op.new_background == spec.background:
            raise SynthError("background target equals the current background")
        edited = dataclasses.replace(spec, background=op.new_background)
        source = render(spec, frames)
        target = render(edited, frames)
        instruction = f"change the background to {op.new_background}"
        # only fully covered pixels are untouched; edge ramps blend the new bg
        preserved = np.stack([core_mask(spec, t) for t in range(frames)])
    elif isinstance(op, AddObject):
        edited = spec
        source = render(spec.without_object(), frames)
        target = render(spec, frames)
        instruction = f"add a {spec.size} {spec.color} {spec.shape} moving {spec.motion}"
        preserved = ~masks
    else:
        raise SynthError(f"unknown edit op {op!r}")
    return EditPair(spec=spec, op=op, source=source, instruction=instruction,
                    target=target, preserved_mask=preserved, edited_spec=edited)


# -- samples and mixture -----------------------------------------------------------


@dataclass
class Sample:
    kind: str
    spec: SceneSpec
    caption_short: str = ""
    caption_detailed: str = ""
    question: str = ""
    answer: str = ""
    video: np.ndarray | None = None  # understanding input or generation target
    source: np.ndarray | None = None  # editing source
    instruction: str = ""
    target: np.ndarray | None = None  # editing target
    preserved_mask: np.ndarray | None = None
    edited_spec: SceneSpec | None = None

    def frames(self) -> int:
        media = self.video if self.video is not None else self.target
        return int(media.shape[0])

    def validate(self) -> None:
        """Cheap self-consistency checks; raises SynthError on violation."""
        if self.kind not in TASKS:
            raise SynthError(f"unknown task kind {self.kind}")
        if self.kind in ("image_understanding", "video_understanding"):
            _, answer = make_qa(self.spec, which=_question_kind(self.question, self.spec))
            if answer != self.answer:
                raise SynthError(f"answer {self.answer!r} does not match spec {self.spec}")
        if self.caption_detailed:
            parsed = parse_caption(self.caption_detailed)
            for field in ("shape", "color", "motion", "background", "size"):
                if parsed.get(field) != getattr(self.spec, field):
                    raise SynthError(f"caption does not round-trip for {field}: {self.caption_detailed!r}")
        if self.kind in ("image_edit", "video_edit"):
            if self.preserved_mask is None:
                raise SynthError("edit sample missing preserved mask")
            src = self.source
            tgt = self.target
            pm = self.preserved_mask
            diff = np.abs(src - tgt).max(axis=1)  # max over channels
            if (diff[pm] > 0).any():
                raise SynthError("edit pair differs inside the preserved region")


def _question_kind(question: str, spec: SceneSpec) -> str:
    if question.startswith("what color"):
        return "color"
    if question.startswith("what shape"):
        return "shape"
    if question.startswith("which direction"):
        return "motion"
    if question.startswith("what is the background"):
        return "background"
    raise SynthError(f"unknown question {question!r}")


def build_sample(kind: str, rng: np.random.Generator, frames: int = 8) -> Sample:
    spec = random_spec(rng)
    n = 1 if kind.startswith("image") or kind == "text_to_image" else frames
    if kind in ("image_understanding", "video_understanding"):
        question, answer = make_qa(spec, rng=rng)
        return Sample(kind=kind, spec=spec, question=question, answer=answer,
                      video=render(spec, n))
    if kind in ("text_to_image", "text_to_video"):
        return Sample(kind=kind, spec=spec, caption_short=caption(spec, "short"),
                      caption_detailed=caption(spec, "detailed"), video=render(spec, n))
    if kind in ("image_edit", "video_edit"):
        op = random_edit_op(spec, rng)
        pair = make_edit_pair(spec, op, n)
        return Sample(kind=kind, spec=spec, source=pair.source, instruction=pair.instruction,
                      target=pair.target, preserved_mask=pair.preserved_mask,
                      edited_spec=pair.edited_spec)
    raise SynthError(f"unknown task kind {kind}")


def sample_mixture(n: int, ratios=TASK_RATIOS, *, rng: np.random.Generator,
                   frames: int = 8) -> list[Sample]:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (len(TASKS),) or abs(ratios.sum() - 100.0) > 0.01 or (ratios < 0).any():
        raise SynthError(f"ratios must be {len(TASKS)} non-negative percentages summing to 100, got {ratios}")
    probs = ratios / ratios.sum()
    kinds = rng.choice(len(TASKS), size=n, p=probs)
    return [build_sample(TASKS[k], rng, frames=frames) for k in kinds]


# -- shards -----------------------------------------------------------------------
#
# Same conventions as the sequence wire format: little-endian, magic + version
# header, tagged fields. One binary file per shard plus a JSON manifest.

SHARD_MAGIC = b"UVSH"
SHARD_VERSION = 1

_F_TEXT, _F_TENSOR, _F_MASK, _F_SPEC = 0, 1, 2, 3


def _pack_spec(spec: SceneSpec) -> bytes:
    return struct.pack("<BBBBBQB", SHAPES.index(spec.shape), COLOR_NAMES.index(spec.color),
                       MOTION_NAMES.index(spec.motion), BACKGROUND_NAMES.index(spec.background),
                       SIZE_NAMES.index(spec.size), spec.seed, int(spec.has_object))


def _unpack_spec(data: bytes, off: int) -> tuple[SceneSpec, int]:
    sh, co, mo, bg, sz, seed, has = struct.unpack_from("<BBBBBQB", data, off)
    return SceneSpec(SHAPES[sh], COLOR_NAMES[co], MOTION_NAMES[mo], BACKGROUND_NAMES[bg],
                     SIZE_NAMES[sz], int(seed), bool(has)), off + struct.calcsize("<BBBBBQB")


def _write_field(buf: bytearray, name: str, ftype: int, payload: bytes) -> None:
    nb = name.encode("ascii")
    buf += struct.pack("<BB", len(nb), ftype)
    buf += nb
    buf += struct.pack("<I", len(payload))
    buf += payload


def _tensor_bytes(arr: np.ndarray) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _mask_bytes(arr: np.ndarray) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.packbits(arr.astype(bool).reshape(-1)).tobytes()


def _sample_fields(s: Sample):
    yield "kind", _F_TEXT, s.kind.encode()
    yield "spec", _F_SPEC, _pack_spec(s.spec)
    for name in ("caption_short", "caption_detailed", "question", "answer", "instruction"):
        val = getattr(s, name)
        if val:
            yield name, _F_TEXT, val.encode()
    for name in ("video", "source", "target"):
        val = getattr(s, name)
        if val is not None:
            yield name, _F_TENSOR, _tensor_bytes(val)
    if s.preserved_mask is not None:
        yield "preserved_mask", _F_MASK, _mask_bytes(s.preserved_mask)
    if s.edited_spec is not None:
        yield "edited_spec", _F_SPEC, _pack_spec(s.edited_spec)


def write_shard(samples: list[Sample], path: str | Path, *, seed: int | None = None,
                ratios=TASK_RATIOS) -> Path:
    path = Path(path)
    buf = bytearray()
    buf += SHARD_MAGIC
    buf += struct.pack("<HI", SHARD_VERSION, len(samples))
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.kind] = counts.get(s.kind, 0) + 1
        fields = list(_sample_fields(s))
        buf += struct.pack("<H", len(fields))
        for name, ftype, payload in fields:
            _write_field(buf, name, ftype, payload)
    path.write_bytes(bytes(buf))
    manifest = {
        "version": SHARD_VERSION,
        "count": len(samples),
        "counts_per_task": counts,
        "seed": seed,
        "ratio_table": {t: r for t, r in zip(TASKS, np.asarray(ratios, dtype=float).tolist())},
    }
    path.with_suffix(path.suffix + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read_tensor(payload: bytes) -> np.ndarray:
    ndim = payload[0]
    shape = struct.unpack_from(f"<{ndim}I", payload, 1)
    off = 1 + 4 * ndim
    return np.frombuffer(payload, dtype="<f4", offset=off).reshape(shape).copy()


def _read_mask(payload: bytes) -> np.ndarray:
    ndim = payload[0]
    shape = struct.unpack_from(f"<{ndim}I", payload, 1)
    off = 1 + 4 * ndim
    total = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=off), count=total)
    return bits.astype(bool).reshape(shape)


def read_shard(path: str | Path) -> list[Sample]:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != SHARD_MAGIC:
        raise DecodeError(0, "bad shard magic")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != SHARD_VERSION:
        raise DecodeError(4, f"unsupported shard version {version}")
    off = 10
    samples = []
    for _ in range(count):
        (nfields,) = struct.unpack_from("<H", data, off)
        off += 2
        fields: dict = {}
        for _ in range(nfields):
            nlen, ftype = struct.unpack_from("<BB", data, off)
            off += 2
            name = data[off:off + nlen].decode("ascii")
            off += nlen
            (plen,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + plen > len(data):
                raise DecodeError(off, "truncated shard field")
            payload = data[off:off + plen]
            off += plen
            if ftype == _F_TEXT:
                fields[name] = payload.decode()
            elif ftype == _F_TENSOR:
                fields[name] = _read_tensor(payload)
            elif ftype == _F_MASK:
                fields[name] = _read_mask(payload)
            elif ftype == _F_SPEC:
                fields[name], _ = _unpack_spec(payload, 0)
            else:
                raise DecodeError(off - plen, f"unknown field type {ftype}")
        kind = fields.pop("kind")
        spec = fields.pop("spec")
        samples.append(Sample(kind=kind, spec=spec, **fields))
    if off != len(data):
        raise DecodeError(off, "trailing bytes in shard")
    return samples
