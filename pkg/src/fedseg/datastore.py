"""Synthetic phantom volumes, client partitioning and binary volume/model I/O.

File formats (all little-endian)::

    FPV1 volume   magic "FPV1" | u32 D | u32 H | u32 W | u8 flags | u8 style | 6 zero bytes
                  | f32[D*H*W] voxels | (flags & 1) u8[D*H*W] labels
    FPM1 model    magic "FPM1" | u32 count | count x (u32 ndim | u32 dims[ndim] | f32 payload)

Volumes live at ``<root>/<client_id>/<scan_id>.fpv``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import ModelParams, Tensor

STYLES = ("MR_T2", "MR_T1", "CT")
STYLE_CODES = {name: code for code, name in enumerate(STYLES)}

FPV_MAGIC = b"FPV1"
FPM_MAGIC = b"FPM1"
FPV_HEADER = struct.Struct("<4s3IBB6x")
MAX_VOXELS = 2**31 - 1


class FormatError(ValueError):
    """Malformed FPV1/FPM1 payload."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimsOverflowError(FormatError):
    pass


class ConfigurationError(ValueError):
    """Invalid data or client roster settings."""


@dataclass
class Volume:
    voxels: np.ndarray
    labels: np.ndarray | None = None
    style: str = "MR_T2"
    scan_id: str = "scan000"

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be D x H x W, got {self.voxels.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.voxels.shape:
                raise ValueError("labels and voxels differ in shape")
        if self.style not in STYLE_CODES:
            raise ValueError(f"unknown modality style {self.style!r}")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    def same_as(self, other: "Volume") -> bool:
        """Bitwise equality of payloads and metadata."""
        if self.style != other.style or self.scan_id != other.scan_id:
            return False
        if self.voxels.shape != other.voxels.shape or self.voxels.tobytes() != other.voxels.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or self.labels.tobytes() == other.labels.tobytes()


@dataclass
class ClientDataset:
    client_id: str
    seed: int
    style: str
    training: list[Volume]
    validation: list[Volume]
    support: Volume
    _segments: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def slice_count(self) -> int:
        return sum(v.n_slices for v in self.training)

    @property
    def scan_count(self) -> int:
        return len(self.training) + len(self.validation) + 1

    def training_slices(self) -> list[tuple[int, int]]:
        return [(i, z) for i, v in enumerate(self.training) for z in range(v.n_slices)]


# -- phantoms --------------------------------------------------------------

# (z, y, x) centre and radii, on a [-1, 1]^3 grid; organ 1 is large and central
_ORGANS = (
    ((0.0, 0.08, 0.0), (1.25, 0.34, 0.40)),
    ((0.1, -0.42, -0.38), (0.70, 0.17, 0.19)),
    ((-0.1, -0.40, 0.42), (0.65, 0.16, 0.20)),
    ((0.0, 0.56, 0.0), (0.55, 0.12, 0.30)),
)

# background tissue then organ intensities 1..4
_STYLE_LEVELS = {
    "MR_T2": (0.30, (0.86, 0.62, 0.72, 0.50)),
    "MR_T1": (0.75, (0.10, 0.36, 0.28, 0.92)),
    "CT": (0.45, (0.64, 0.56, 0.72, 0.93)),
}


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def generate_phantom(seed: int, style: str, n_slices: int, hw: int, n_organs: int,
                     scan_id: str = "scan000") -> Volume:
    """Deterministic multi-organ phantom in one modality style."""
    if hw % 4 or hw < 8:
        raise ConfigurationError(f"phantom size must be a multiple of 4 and >= 8, got {hw}")
    if not 1 <= n_organs <= 4:
        raise ConfigurationError(f"n_organs must lie in [1, 4], got {n_organs}")
    if n_slices < 1:
        raise ConfigurationError("n_slices must be positive")
    if style not in _STYLE_LEVELS:
        raise ConfigurationError(f"unknown style {style!r}")
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, n_slices) if n_slices > 1 else np.zeros(1),
        np.linspace(-1, 1, hw),
        np.linspace(-1, 1, hw),
        indexing="ij",
    )
    body_r = (0.88 + 0.06 * rng.uniform(-1, 1), 0.80 + 0.06 * rng.uniform(-1, 1))
    body = (y / body_r[0]) ** 2 + (x / body_r[1]) ** 2 <= 1.0

    labels = np.zeros(z.shape, dtype=np.uint8)
    for organ in range(n_organs):
        (cz, cy, cx), (rz, ry, rx) = _ORGANS[organ]
        cy, cx = cy + rng.uniform(-0.06, 0.06), cx + rng.uniform(-0.06, 0.06)
        cz = cz + rng.uniform(-0.1, 0.1)
        rz, ry, rx = (r * rng.uniform(0.85, 1.15) for r in (rz, ry, rx))
        theta = np.arctan2(y - cy, x - cx)
        wobble = 1.0 + 0.07 * np.sin(2 * theta + rng.uniform(0, 2 * np.pi)) \
            + 0.05 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi))
        d = ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2
        inside = (d <= wobble ** 2) & body & (labels == 0)
        labels[inside] = organ + 1

    tissue, levels = _STYLE_LEVELS[style]
    img = np.where(body, tissue, 0.0)
    for organ in range(n_organs):
        level = levels[organ] + rng.uniform(-0.03, 0.03)
        img = np.where(labels == organ + 1, level, img)
    texture = 0.04 * _smooth_field(rng, img.shape, (0.5, 1.5, 1.5))
    img = img + np.where(body, texture, 0.0)
    if style == "MR_T2":
        img = img * (1.0 + 0.15 * _smooth_field(rng, img.shape, (4.0, 12.0, 12.0)))
        img = img + 0.02 * rng.standard_normal(img.shape)
    elif style == "MR_T1":
        img = img * (1.0 + 0.10 * _smooth_field(rng, img.shape, (4.0, 12.0, 12.0)))
        img = img + 0.02 * rng.standard_normal(img.shape)
    else:
        img = img + 0.03 * rng.standard_normal(img.shape)
    voxels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume(voxels, labels, style, scan_id)


# -- partitioning ----------------------------------------------------------
def validation_count(n_scans: int) -> int:
    """Scans held out for validation under the 4:1 split (half rounds up)."""
    return max(1, int(np.floor(n_scans / 5 + 0.5)))


def split_scans(volumes: list[Volume]) -> tuple[Volume, list[Volume], list[Volume]]:
    """Return (support, training, validation) from scans sorted by id."""
    if len(volumes) < 5:
        raise ConfigurationError(
            f"a client needs at least 5 scans for the 4:1 split plus a support scan, got {len(volumes)}"
        )
    vols = sorted(volumes, key=lambda v: v.scan_id)
    n_val = validation_count(len(vols))
    train_support, validation = vols[:-n_val], vols[-n_val:]
    return train_support[0], train_support[1:], validation


def scan_seed(client_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((int(client_seed), int(index))).generate_state(1)[0])


def _slice_count(spec, rng) -> int:
    if isinstance(spec, (tuple, list)):
        lo, hi = spec
        return int(rng.integers(lo, hi + 1))
    return int(spec)


def client_volumes(count: int, seed: int, style: str, n_slices=(30, 50), hw: int = 64,
                   n_organs: int = 4) -> list[Volume]:
    if count < 5:
        raise ConfigurationError(
            f"client scan count {count} is below 5: the 4:1 split needs a validation scan, "
            "a support scan and at least one training scan"
        )
    depth_rng = np.random.default_rng((int(seed), 0xD3F7))
    return [
        generate_phantom(scan_seed(seed, j), style, _slice_count(n_slices, depth_rng), hw, n_organs,
                         scan_id=f"scan{j:03d}")
        for j in range(count)
    ]


def make_client(client_id: str, volumes: list[Volume], seed: int, style: str) -> ClientDataset:
    support, training, validation = split_scans(volumes)
    return ClientDataset(client_id, int(seed), style, training, validation, support)


def partition_clients(counts, seeds, styles, n_slices=(30, 50), hw: int = 64,
                      n_organs: int = 4) -> list[ClientDataset]:
    """Generate and split one synthetic dataset per client."""
    if not counts:
        raise ConfigurationError("at least one client is required")
    if not len(counts) == len(seeds) == len(styles):
        raise ConfigurationError("counts, seeds and styles must have equal length")
    clients = []
    for k, (count, seed, style) in enumerate(zip(counts, seeds, styles)):
        vols = client_volumes(int(count), int(seed), style, n_slices, hw, n_organs)
        clients.append(make_client(f"client{k + 1}", vols, seed, style))
    return clients


# -- FPV1 ------------------------------------------------------------------
def encode_volume(vol: Volume) -> bytes:
    d, h, w = vol.voxels.shape
    flags = 1 if vol.labels is not None else 0
    parts = [FPV_HEADER.pack(FPV_MAGIC, d, h, w, flags, STYLE_CODES[vol.style]),
             vol.voxels.astype("<f4", copy=False).tobytes()]
    if vol.labels is not None:
        parts.append(vol.labels.tobytes())
    return b"".join(parts)


def decode_volume(buf: bytes, scan_id: str = "scan000") -> Volume:
    if len(buf) < 4 or buf[:4] != FPV_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {FPV_MAGIC!r}")
    if len(buf) < FPV_HEADER.size:
        raise TruncatedError(f"header truncated: {len(buf)} of {FPV_HEADER.size} bytes")
    _, d, h, w, flags, style = FPV_HEADER.unpack_from(buf)
    n = d * h * w
    if n > MAX_VOXELS:
        raise DimsOverflowError(f"dims {d}x{h}x{w} exceed {MAX_VOXELS} voxels")
    if style >= len(STYLES):
        raise FormatError(f"unknown style code {style}")
    need = FPV_HEADER.size + 4 * n + (n if flags & 1 else 0)
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload")
    off = FPV_HEADER.size
    voxels = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(d, h, w).astype(np.float32)
    labels = None
    if flags & 1:
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(d, h, w).copy()
    return Volume(voxels, labels, STYLES[style], scan_id)


def write_volume(path, vol: Volume) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(vol))


def read_volume(path) -> Volume:
    path = Path(path)
    return decode_volume(path.read_bytes(), scan_id=path.stem)


def write_clients(root, clients_volumes: dict[str, list[Volume]]) -> list[Path]:
    root = Path(root)
    written = []
    for client_id, vols in clients_volumes.items():
        for vol in vols:
            p = root / client_id / f"{vol.scan_id}.fpv"
            write_volume(p, vol)
            written.append(p)
    return written


def read_client_dir(path) -> list[Volume]:
    path = Path(path)
    files = sorted(path.glob("*.fpv"))
    if not files:
        raise FileNotFoundError(f"no .fpv volumes under {path}")
    return [read_volume(p) for p in files]


# -- FPM1 ------------------------------------------------------------------
def encode_model(params: ModelParams) -> bytes:
    parts = [FPM_MAGIC, struct.pack("<I", len(params))]
    for t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_model(buf: bytes, names: list[str] | None = None) -> ModelParams:
    if buf[:4] != FPM_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {FPM_MAGIC!r}")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise TruncatedError("model payload truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
            tensors.append(Tensor(arr, requires_grad=True))
    except struct.error as exc:
        raise TruncatedError(f"model header truncated: {exc}") from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after model payload")
    if names is None:
        names = [f"param{i}" for i in range(len(tensors))]
    if len(names) != len(tensors):
        raise FormatError(f"model holds {len(tensors)} tensors, expected {len(names)}")
    return ModelParams(list(names), tensors)


def write_model(path, params: ModelParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(params))


def read_model(path, names: list[str] | None = None) -> ModelParams:
    return decode_model(Path(path).read_bytes(), names)
