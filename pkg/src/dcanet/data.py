"""Multi-domain data: synthetic domain generator, NIfTI ingestion, slice
triples and leave-one-domain-out splits.

Volumes are stored as (depth, height, width) arrays with axial slices along
axis 0; ``spacing`` is given in the same axis order, in mm.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError


@dataclass(frozen=True)
class DomainStyle:
    """Four knobs of synthetic domain shift."""

    gamma: float = 1.0  # contrast exponent on [0, 1] intensities
    bias: float = 0.3  # strength of the multiplicative smooth bias field
    noise: float = 0.05  # additive Gaussian noise sigma
    texture_freq: float = 4.0  # background texture cycles per image
    texture_amp: float = 0.1


DEFAULT_STYLES = {
    "A": DomainStyle(gamma=0.6, bias=0.2, noise=0.03, texture_freq=2.0),
    "B": DomainStyle(gamma=1.0, bias=0.5, noise=0.06, texture_freq=4.0),
    "C": DomainStyle(gamma=1.6, bias=0.3, noise=0.05, texture_freq=6.0),
    "D": DomainStyle(gamma=0.8, bias=0.7, noise=0.10, texture_freq=9.0),
}


@dataclass
class Volume:
    image: np.ndarray  # (D, H, W) float32
    label: np.ndarray  # (D, H, W) uint8 in {0, 1}
    spacing: tuple[float, float, float]
    patient_id: str

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise DataError(f"{self.patient_id}: image {self.image.shape} / label {self.label.shape} mismatch")
        if self.image.ndim != 3:
            raise DataError(f"{self.patient_id}: expected 3-D volume, got shape {self.image.shape}")
        vals = np.unique(self.label)
        if not np.isin(vals, (0, 1)).all():
            raise DataError(f"{self.patient_id}: label values {vals.tolist()} are not binary")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"{self.patient_id}: invalid spacing {self.spacing}")
        self.label = self.label.astype(np.uint8)


@dataclass
class DomainDataset:
    domain_id: str
    volumes: list[Volume]
    style: DomainStyle | None = None
    seed: int | None = None

    @property
    def patient_ids(self) -> list[str]:
        return [v.patient_id for v in self.volumes]


@dataclass
class DomainRegistry:
    domains: list[DomainDataset]

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate domain ids: {ids}")

    @property
    def M(self) -> int:
        return len(self.domains)

    @property
    def domain_ids(self) -> list[str]:
        return [d.domain_id for d in self.domains]

    def __getitem__(self, domain_id: str) -> DomainDataset:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W): slices z-1, z, z+1
    label: np.ndarray  # (H, W) mask of slice z
    domain_id: str
    patient_id: str
    slice_index: int


@dataclass
class SplitSpec:
    held_out_domain: str
    val_fraction: float = 0.2
    test_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if abs(self.val_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError("val_fraction + test_fraction must be 1")


@dataclass
class Split:
    train: list[Volume]
    train_domains: list[str]
    val: list[Volume]
    test: list[Volume]
    held_out_domain: str
    train_volume_domains: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- synthetic


def _blob_mask(depth: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Perturbed elliptic blob present on every slice; radius tapers towards the ends."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size / 2 + rng.uniform(-0.12, 0.12, 2) * size
    ry, rx = rng.uniform(0.15, 0.27, 2) * size
    theta0 = rng.uniform(0, np.pi)
    n_harm = 4
    amps = rng.normal(0, 0.05, n_harm) / np.arange(1, n_harm + 1) ** 0.5
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    drift = rng.normal(0, 0.4, n_harm)  # slow phase change along z
    mask = np.zeros((depth, size, size), dtype=np.uint8)
    zc = (depth - 1) / 2
    for z in range(depth):
        t = (z - zc) / max(depth / 2, 1)
        scale = 1.0 - 0.35 * t * t
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta0) + dy * np.sin(theta0)
        v = -dx * np.sin(theta0) + dy * np.cos(theta0)
        ang = np.arctan2(v, u)
        rad = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        k = np.arange(1, n_harm + 1)[:, None, None] + 1
        wobble = (amps[:, None, None] * np.cos(k * ang + phases[:, None, None] + drift[:, None, None] * t)).sum(0)
        mask[z] = rad < scale * (1.0 + wobble)
    return mask


def _bias_field(size: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[-1:1:size * 1j, -1:1:size * 1j]
    c = rng.normal(0, 1, 5)
    poly = c[0] * xx + c[1] * yy + c[2] * xx * yy + c[3] * (xx ** 2 - 0.5) + c[4] * (yy ** 2 - 0.5)
    poly /= max(np.abs(poly).max(), 1e-8)
    return np.exp(strength * poly)


def synth_volume(style: DomainStyle, depth: int, size: int, rng: np.random.Generator, patient_id: str) -> Volume:
    label = _blob_mask(depth, size, rng)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex_dir = rng.uniform(0, np.pi)
    tex_phase = rng.uniform(0, 2 * np.pi)
    tex = np.sin(2 * np.pi * style.texture_freq * (xx * np.cos(tex_dir) + yy * np.sin(tex_dir)) + tex_phase)
    tex2 = np.sin(2 * np.pi * style.texture_freq * (xx * np.sin(tex_dir) - yy * np.cos(tex_dir)))
    bias = _bias_field(size, style.bias, rng)
    organ_level = rng.uniform(0.65, 0.8)
    bg_level = rng.uniform(0.25, 0.4)
    image = np.empty((depth, size, size), dtype=np.float64)
    for z in range(depth):
        base = bg_level + style.texture_amp * 0.5 * (tex + tex2 * np.cos(0.3 * z))
        organ = organ_level + 0.04 * np.sin(2 * np.pi * (xx + yy + 0.1 * z))
        img = np.where(label[z] > 0, organ, base)
        img = np.clip(img, 0.02, 1.0) ** style.gamma
        img = img * bias
        img = img + rng.normal(0, style.noise, img.shape)
        image[z] = img
    spacing = (3.0, 1.0, 1.0)
    return Volume(image.astype(np.float32), label, spacing, patient_id)


def generate_synthetic_domain(
    domain_id: str,
    style: DomainStyle,
    n_volumes: int,
    size: int = 64,
    depth: int = 12,
    seed: int = 0,
) -> DomainDataset:
    if size <= 0 or size % 16:
        raise DataError(f"synthetic size must be a positive multiple of 16, got {size}")
    if depth < 1 or n_volumes < 1:
        raise DataError("depth and n_volumes must be >= 1")
    rng = np.random.default_rng(seed)
    vols = [synth_volume(style, depth, size, rng, f"{domain_id}{i:03d}") for i in range(n_volumes)]
    return DomainDataset(domain_id, vols, style, seed)


def generate_synthetic_registry(
    styles: dict[str, DomainStyle],
    n_volumes: int,
    size: int = 64,
    depth: int = 12,
    seed: int = 0,
) -> DomainRegistry:
    """One domain per style entry, each with its own child seed of ``seed``."""
    seqs = np.random.SeedSequence(seed).spawn(len(styles))
    return DomainRegistry([
        generate_synthetic_domain(dom, style, n_volumes, size, depth, int(sq.generate_state(1)[0]))
        for (dom, style), sq in zip(styles.items(), seqs)
    ])


def save_domain(dataset: DomainDataset, out_dir) -> Path:
    """Persist as raw little-endian float32 slabs plus a JSON sidecar."""
    out = Path(out_dir) / dataset.domain_id
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.volumes:
        img_name, lab_name = f"{v.patient_id}_image.f32", f"{v.patient_id}_label.f32"
        v.image.astype("<f4").tofile(out / img_name)
        v.label.astype("<f4").tofile(out / lab_name)
        entries.append(
            {"patient_id": v.patient_id, "image": img_name, "label": lab_name, "shape": list(v.image.shape),
             "spacing": list(v.spacing)}
        )
    sidecar = {
        "domain_id": dataset.domain_id,
        "style": asdict(dataset.style) if dataset.style else None,
        "seed": dataset.seed,
        "volumes": entries,
    }
    (out / "domain.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_domain(domain_dir) -> DomainDataset:
    domain_dir = Path(domain_dir)
    meta_path = domain_dir / "domain.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {meta_path}: {exc}") from exc
    vols = []
    for e in meta["volumes"]:
        shape = tuple(e["shape"])
        arrs = []
        for key in ("image", "label"):
            p = domain_dir / e[key]
            try:
                a = np.fromfile(p, dtype="<f4")
            except OSError as exc:
                raise DataError(f"cannot read {p}: {exc}") from exc
            if a.size != int(np.prod(shape)):
                raise DataError(f"{p}: expected {int(np.prod(shape))} values, found {a.size}")
            arrs.append(a.reshape(shape))
        vols.append(Volume(arrs[0].astype(np.float32), arrs[1].astype(np.uint8), tuple(e["spacing"]), e["patient_id"]))
    style = DomainStyle(**meta["style"]) if meta.get("style") else None
    return DomainDataset(meta["domain_id"], vols, style, meta.get("seed"))


def load_synthetic_registry(root) -> DomainRegistry:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "domain.json").exists()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"no synthetic domains found under {root}")
    return DomainRegistry([load_domain(d) for d in dirs])


# ---------------------------------------------------------------- real data


def _read_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asarray(img.dataobj)
        zooms = img.header.get_zooms()[:3]
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise DataError(f"cannot load NIfTI volume {path}: {exc}") from exc
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a 3-D volume, got shape {arr.shape}")
    # (x, y, z) -> (z, x, y) so axial slices come first
    return np.moveaxis(arr, -1, 0), (float(zooms[2]), float(zooms[0]), float(zooms[1]))


def load_multisite_volumes(root, manifest) -> DomainRegistry:
    """Read NIfTI image/label pairs listed per domain in ``manifest``.

    ``manifest`` is a dict or a path to JSON of the form
    ``{domain_id: {"images": [...], "labels": [...], "patient_ids": [...]}}``
    with file paths relative to ``root``.
    """
    root = Path(root)
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    if not manifest:
        raise DataError("manifest lists no domains")
    domains = []
    for domain_id, entry in manifest.items():
        images, labels = entry["images"], entry["labels"]
        pids = entry.get("patient_ids") or [Path(p).name.split(".")[0] for p in images]
        if not (len(images) == len(labels) == len(pids)):
            raise DataError(f"domain {domain_id}: images/labels/patient_ids lengths differ")
        vols = []
        for img_p, lab_p, pid in zip(images, labels, pids):
            img, spacing = _read_nifti(root / img_p)
            lab, _ = _read_nifti(root / lab_p)
            if img.shape != lab.shape:
                raise DataError(f"{root / img_p}: image {img.shape} and label {lab.shape} shapes differ")
            vals = np.unique(lab)
            if not np.isin(vals, (0, 1)).all():
                raise DataError(f"{root / lab_p}: label values {vals.tolist()} are not binary")
            vols.append(Volume(img.astype(np.float32), lab.astype(np.uint8), spacing, str(pid)))
        domains.append(DomainDataset(str(domain_id), vols))
    return DomainRegistry(domains)


# ---------------------------------------------------------------- preprocessing


def resize_slices(volume: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    """Resize every axial slice; ``mode`` is "bilinear" (images) or "nearest" (labels)."""
    if tuple(volume.shape[1:]) == tuple(size):
        return volume.copy()
    t = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32))[:, None]
    kw = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=tuple(size), mode=mode, **kw)[:, 0].numpy()
    return out.astype(volume.dtype) if mode == "nearest" else out


def zscore_nonzero(image: np.ndarray) -> np.ndarray:
    nz = image != 0
    if not nz.any():
        raise DataError("cannot normalize an all-zero volume")
    vals = image[nz].astype(np.float64)
    std = vals.std()
    if std < 1e-8:
        raise DataError("cannot normalize a constant-intensity volume")
    out = np.zeros_like(image, dtype=np.float32)
    out[nz] = ((vals - vals.mean()) / std).astype(np.float32)
    return out


def preprocess_volume(volume: Volume, target_size: int = 64, normalize: bool = True) -> Volume:
    img = zscore_nonzero(volume.image) if normalize else volume.image.astype(np.float32)
    size = (target_size, target_size)
    img = resize_slices(img, size, "bilinear")
    lab = resize_slices(volume.label, size, "nearest")
    return Volume(img.astype(np.float32), lab, volume.spacing, volume.patient_id)


def slice_triple(image: np.ndarray, z: int) -> np.ndarray:
    d = image.shape[0]
    idx = [max(z - 1, 0), z, min(z + 1, d - 1)]
    return image[idx]


def make_slice_triples(volume: Volume, domain_id: str = "") -> list[Sample]:
    return [
        Sample(slice_triple(volume.image, z), volume.label[z], domain_id, volume.patient_id, z)
        for z in range(volume.image.shape[0])
    ]


# ---------------------------------------------------------------- splitting


def leave_one_domain_out_split(registry: DomainRegistry, spec: SplitSpec) -> Split:
    if spec.held_out_domain not in registry.domain_ids:
        raise KeyError(f"unknown domain id {spec.held_out_domain!r}; have {registry.domain_ids}")
    if registry.M < 2:
        raise DataError("leave-one-domain-out needs at least 2 domains")
    unseen = registry[spec.held_out_domain]
    if len(unseen.volumes) < 2:
        raise DataError(f"held-out domain {spec.held_out_domain} needs >= 2 patients")
    train, train_dom = [], []
    for d in registry.domains:
        if d.domain_id == spec.held_out_domain:
            continue
        train.extend(d.volumes)
        train_dom.extend([d.domain_id] * len(d.volumes))
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(unseen.volumes))
    n_val = int(round(spec.val_fraction * len(order)))
    n_val = min(max(n_val, 1), len(order) - 1)
    val = [unseen.volumes[i] for i in sorted(order[:n_val])]
    test = [unseen.volumes[i] for i in sorted(order[n_val:])]
    seen = [d.domain_id for d in registry.domains if d.domain_id != spec.held_out_domain]
    return Split(train, seen, val, test, spec.held_out_domain, train_dom)


def num_workers_from_env(default: int = 0) -> int:
    try:
        return max(0, int(os.environ.get("DCA_NUM_WORKERS", default)))
    except ValueError:
        return default
