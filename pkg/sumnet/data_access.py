"""
Dataset manifests, USVL volume files, patient-wise folds and training batches.

USVL container: magic "USVL", version u32 LE, F, H, W as u32 LE, then F*H*W
unsigned bytes, frame-major and row-major. Masks use the same container with
values {0, 255}.
"""
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import KFold

from .config import DEFAULT_SIGMA, DEFAULT_W0, POOL_DIVISOR, VOLUME_MAGIC, VOLUME_VERSION
from .errors import FormatError, ManifestError, ShapeError, ValidationError
from .utils import get_logger
from .weighting import weight_maps_for

logger = get_logger(__name__)

_HEADER = struct.Struct("<4sIIII")


# Volume files

def write_volume(path, stack):
    arr = np.asarray(stack)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ShapeError(f"volume must be (F, H, W), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise FormatError(f"volume payload must be uint8, got {arr.dtype}")
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    f_, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, f_, h, w))
        f.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_volume_header(path):
    if not os.path.exists(path):
        raise ManifestError(f"volume file not found: {path}")
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"truncated volume header: {path}")
    magic, version, f_, h, w = _HEADER.unpack(head)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"not a USVL volume (bad magic): {path}")
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported USVL version {version}: {path}")
    return f_, h, w


def read_volume(path):
    f_, h, w = read_volume_header(path)
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        payload = f.read()
    expected = f_ * h * w
    if len(payload) < expected:
        raise FormatError(f"truncated volume: {path} holds {len(payload)} of {expected} bytes")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(f_, h, w).copy()


# Manifest

@dataclass
class ManifestEntry:
    patient_id: str
    image_path: str
    mask_paths: dict
    width: int
    height: int
    n_frames: int
    spacing: tuple = None


@dataclass
class DatasetManifest:
    entries: list
    path: str = ""

    def __len__(self):
        return len(self.entries)

    def patient_ids(self):
        return [e.patient_id for e in self.entries]

    def structures(self):
        names = []
        for e in self.entries:
            names.extend(s for s in e.mask_paths if s not in names)
        return names


_INT_KEYS = {"width", "height", "frames"}
_FLOAT_KEYS = {"spacing_y", "spacing_x"}


def _parse_block(lines, base_dir, where):
    raw = {}
    for lineno, line in lines:
        if "=" not in line:
            raise ManifestError(f"{where}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ManifestError(f"{where}:{lineno}: duplicate key {key!r}")
        raw[key] = val

    required = ("patient", "image", "width", "height", "frames")
    missing = [k for k in required if k not in raw]
    if missing:
        raise ManifestError(f"{where}: block starting line {lines[0][0]} is missing {', '.join(missing)}")
    for key in raw:
        if key not in required and key not in _FLOAT_KEYS and not key.startswith("mask."):
            raise ManifestError(f"{where}: unknown key {key!r}")
    try:
        dims = {k: int(raw[k]) for k in _INT_KEYS}
        spacing = None
        if "spacing_y" in raw or "spacing_x" in raw:
            spacing = (float(raw["spacing_y"]), float(raw["spacing_x"]))
    except (KeyError, ValueError) as e:
        raise ManifestError(f"{where}: invalid dimension or spacing value ({e})")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    masks = {k.split(".", 1)[1]: resolve(v) for k, v in raw.items() if k.startswith("mask.")}
    return ManifestEntry(
        patient_id=raw["patient"],
        image_path=resolve(raw["image"]),
        mask_paths=masks,
        width=dims["width"],
        height=dims["height"],
        n_frames=dims["frames"],
        spacing=spacing,
    )


def parse_manifest(text, base_dir="", where="<manifest>"):
    blocks, current = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            if current:
                blocks.append(current)
                current = []
            continue
        current.append((lineno, line))
    if current:
        blocks.append(current)
    return DatasetManifest([_parse_block(b, base_dir, where) for b in blocks], path=where)


def validate_manifest(manifest):
    seen = set()
    for e in manifest.entries:
        if e.patient_id in seen:
            raise ManifestError(f"duplicate patient id {e.patient_id!r}")
        seen.add(e.patient_id)
        declared = (e.n_frames, e.height, e.width)
        for path in [e.image_path, *e.mask_paths.values()]:
            found = read_volume_header(path)
            if found != declared:
                raise ManifestError(
                    f"dimension mismatch in {path}: declared {declared[0]}x{declared[1]}x{declared[2]} "
                    f"(frames x height x width), file holds {found[0]}x{found[1]}x{found[2]}"
                )
    return manifest


def load_manifest(path):
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    manifest = parse_manifest(text, base_dir=os.path.dirname(os.path.abspath(path)), where=path)
    return validate_manifest(manifest)


def write_manifest(entries, path):
    base = os.path.dirname(os.path.abspath(path))
    blocks = []
    for e in entries:
        lines = [f"patient={e.patient_id}", f"image={os.path.relpath(e.image_path, base)}"]
        for name, p in e.mask_paths.items():
            lines.append(f"mask.{name}={os.path.relpath(p, base)}")
        lines += [f"width={e.width}", f"height={e.height}", f"frames={e.n_frames}"]
        if e.spacing is not None:
            lines += [f"spacing_y={e.spacing[0]}", f"spacing_x={e.spacing[1]}"]
        blocks.append("\n".join(lines))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n\n".join(blocks) + "\n")
    return path


# Volumes in memory

@dataclass
class VolumeRecord:
    patient_id: str
    frames: np.ndarray                      # (F, 1, H, W) float64 in [0, 1]
    masks: dict                             # structure -> (F, 1, H, W) uint8 in {0, 1}
    spacing: tuple = None
    original_hw: tuple = None
    pads: tuple = (0, 0, 0, 0)              # top, bottom, left, right
    weight_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def crop(self, arr):
        return crop(arr, self.pads)


def pad_to_multiple(arr, multiple=POOL_DIVISOR):
    """Zero-pad the last two axes up to a multiple, centred. Returns (padded, pads)."""
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if not ph and not pw:
        return arr, pads
    widths = [(0, 0)] * (arr.ndim - 2) + [(pads[0], pads[1]), (pads[2], pads[3])]
    return np.pad(arr, widths), pads


def crop(arr, pads):
    top, bottom, left, right = pads
    h, w = arr.shape[-2:]
    return arr[..., top:h - bottom, left:w - right]


def volume_from_arrays(patient_id, image_u8, masks_u8=None, spacing=None):
    """Scale, binarise and pad raw uint8 stacks into a VolumeRecord."""
    image_u8 = np.asarray(image_u8)
    frames, pads = pad_to_multiple(image_u8.astype(np.float64) / 255.0)
    masks = {}
    for name, m in (masks_u8 or {}).items():
        m = np.asarray(m)
        if m.shape != image_u8.shape:
            raise ShapeError(f"{patient_id}: mask {name} shape {m.shape} != image {image_u8.shape}")
        masks[name] = pad_to_multiple((m > 127).astype(np.uint8))[0][:, None]
    return VolumeRecord(
        patient_id=patient_id,
        frames=frames[:, None],
        masks=masks,
        spacing=spacing,
        original_hw=tuple(image_u8.shape[-2:]),
        pads=pads,
    )


def load_volume(entry):
    image = read_volume(entry.image_path)
    masks = {name: read_volume(p) for name, p in entry.mask_paths.items()}
    record = volume_from_arrays(entry.patient_id, image, masks, entry.spacing)
    logger.debug("loaded %s: %d frames, padded by %s", entry.patient_id, record.n_frames, record.pads)
    return record


def load_dataset(manifest):
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    return [load_volume(e) for e in manifest.entries]


# Folds

@dataclass(frozen=True)
class Fold:
    index: int
    held_out_patients: tuple
    training_patients: tuple


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, i):
        return self.folds[i]

    def __iter__(self):
        return iter(self.folds)


def make_folds(patient_ids, k=None, seed=0):
    """
    Patient-wise K-fold split. ``k`` defaults to the number of patients
    (leave-one-patient-out). Deterministic for a given seed.
    """
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    k = len(ids) if k is None or k == 0 else int(k)
    if k > len(ids):
        raise ValidationError(f"k={k} folds requested for {len(ids)} patients")
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")

    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    folds = []
    for i, (train_idx, test_idx) in enumerate(splitter.split(ids)):
        folds.append(Fold(
            index=i,
            held_out_patients=tuple(ids[j] for j in sorted(test_idx)),
            training_patients=tuple(ids[j] for j in sorted(train_idx)),
        ))
    return FoldSplit(tuple(folds))


# Batches

@dataclass
class Batch:
    frames: np.ndarray
    masks: np.ndarray
    weights: np.ndarray
    provenance: list                        # (patient_id, frame_index) per item


def batch_iter(records, fold, batch_size, seed, epoch=0, structure=None,
               w0=DEFAULT_W0, sigma=DEFAULT_SIGMA, start_batch=0):
    """
    Shuffled training batches for one epoch. Only training patients of
    ``fold`` contribute; the order depends on (seed, epoch) alone and the
    last partial batch is emitted. The first ``start_batch`` batches of the
    epoch are skipped.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    allowed = set(fold.training_patients) if fold is not None else None
    chosen = [r for r in records if allowed is None or r.patient_id in allowed]
    if not chosen:
        return
    structure = structure or next(iter(chosen[0].masks))
    shapes = {r.frames.shape[2:] for r in chosen}
    if len(shapes) > 1:
        raise ShapeError(f"training frames differ in size after padding: {sorted(shapes)}")

    index = [(ri, fi) for ri, r in enumerate(chosen) for fi in range(r.n_frames)]
    order = np.random.default_rng([seed, epoch]).permutation(len(index))
    for start in range(start_batch * batch_size, len(order), batch_size):
        items = [index[j] for j in order[start:start + batch_size]]
        frames = np.stack([chosen[ri].frames[fi] for ri, fi in items])
        masks = np.stack([chosen[ri].masks[structure][fi] for ri, fi in items])
        weights = np.stack([
            weight_maps_for(chosen[ri], structure, w0, sigma)[fi] for ri, fi in items
        ])
        yield Batch(
            frames=frames,
            masks=masks,
            weights=weights,
            provenance=[(chosen[ri].patient_id, fi) for ri, fi in items],
        )
