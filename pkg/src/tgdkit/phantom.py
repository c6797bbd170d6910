"""Synthetic count-limited imaging data: phantoms, scan simulation, thinning.

A phantom is a stack of slices holding a nonnegative "activity" image built
from ellipses, hot lesions and a smooth random texture. A scan realization
scales the activity to a count budget, draws independent Poisson counts per
voxel, then smooths with an in-plane Gaussian PSF and rescales back to
activity units. Smoothing after the draw is what gives the noise its spatial
correlation: a wider PSF means coarser noise grain, which is exactly the
property a denoiser keys on. Every random draw flows from an explicit seed,
so a manifest reproduces a dataset byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

# fractions of the full count budget used for noise-adaptive training inputs
# (short acquisitions vs. the full-length target)
DATASET_COUNT_LEVELS = (0.05, 0.075, 0.1, 0.15, 0.2, 0.3)

# slice-profile modulation: geometry shrinks parabolically away from the
# center slice so neighboring slices are similar but not identical
SLICE_MODULATION = 0.1

TEXTURE_AMPLITUDE = 0.15
TEXTURE_SMOOTHING = 4.0


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (y, x)
    axes: tuple[float, float]    # (a, b) in pixels
    intensity: float


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]
    radius: float
    contrast: float  # multiplier over the local background


@dataclass(frozen=True)
class PhantomSpec:
    height: int
    width: int
    slices: int = 5
    ellipses: tuple[Ellipse, ...] = ()
    lesions: tuple[Lesion, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for e in self.ellipses:
            if e.intensity < 0:
                raise ValueError("ellipse intensity must be >= 0")
        for l in self.lesions:
            y, x = l.center
            if not (l.radius <= y <= self.height - 1 - l.radius and
                    l.radius <= x <= self.width - 1 - l.radius):
                raise ValueError(f"lesion at {l.center} r={l.radius} out of bounds")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "slices": self.slices,
            "seed": self.seed,
            "ellipses": [
                {"center": list(e.center), "axes": list(e.axes), "intensity": e.intensity}
                for e in self.ellipses
            ],
            "lesions": [
                {"center": list(l.center), "radius": l.radius, "contrast": l.contrast}
                for l in self.lesions
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        return PhantomSpec(
            height=d["height"],
            width=d["width"],
            slices=d.get("slices", 5),
            seed=d.get("seed", 0),
            ellipses=tuple(
                Ellipse(tuple(e["center"]), tuple(e["axes"]), e["intensity"])
                for e in d.get("ellipses", ())
            ),
            lesions=tuple(
                Lesion(tuple(l["center"]), l["radius"], l["contrast"])
                for l in d.get("lesions", ())
            ),
        )


@dataclass(frozen=True)
class ScanProtocol:
    psf_sigma: float
    count_budget: float
    seed: int = 0

    def __post_init__(self):
        if self.psf_sigma <= 0:
            raise ValueError("psf_sigma must be positive")
        if self.count_budget <= 0:
            raise ValueError("count_budget must be positive")

    def to_dict(self) -> dict:
        return {
            "psf_sigma": self.psf_sigma,
            "count_budget": self.count_budget,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScanProtocol":
        return ScanProtocol(d["psf_sigma"], d["count_budget"], d.get("seed", 0))


def _slice_factor(s: int, n_slices: int) -> float:
    if n_slices == 1:
        return 1.0
    c = (n_slices - 1) / 2.0
    u = (s - c) / max(c, 1.0)
    return 1.0 - SLICE_MODULATION * u * u


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Rasterize the spec into an [S, H, W] activity stack (float32).

    Ellipse intensities accumulate additively, lesions multiply the
    underlying background, and a smooth seeded texture field modulates the
    whole stack so flat regions still carry learnable structure.
    """
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    vol = np.zeros((spec.slices, spec.height, spec.width), dtype=np.float64)
    for s in range(spec.slices):
        f = _slice_factor(s, spec.slices)
        img = np.zeros((spec.height, spec.width), dtype=np.float64)
        for e in spec.ellipses:
            cy, cx = e.center
            a, b = e.axes[0] * f, e.axes[1] * f
            inside = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
            img[inside] += e.intensity
        for l in spec.lesions:
            cy, cx = l.center
            r = l.radius * f
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[inside] *= l.contrast
        vol[s] = img
    if spec.ellipses:
        rng = np.random.default_rng(spec.seed)
        noise = rng.standard_normal(vol.shape)
        texture = gaussian_filter(noise, sigma=(0.0, TEXTURE_SMOOTHING, TEXTURE_SMOOTHING))
        peak = np.abs(texture).max()
        if peak > 0:
            vol *= 1.0 + TEXTURE_AMPLITUDE * texture / peak
    return vol.astype(np.float32)


def _count_scale(activity: np.ndarray, count_budget: float) -> float:
    """Activity-to-expected-counts factor: the budget is per slice."""
    total = float(activity.sum())
    if total == 0.0:
        return 0.0
    return count_budget * activity.shape[0] / total


def simulate_counts(
    activity: np.ndarray, protocol: ScanProtocol, seed: int | None = None
) -> tuple[np.ndarray, float]:
    """Draw raw Poisson counts (pre-PSF) and return them with the scale."""
    if np.any(activity < 0):
        raise ValueError("activity must be nonnegative")
    scale = _count_scale(activity, protocol.count_budget)
    rng = np.random.default_rng(protocol.seed if seed is None else seed)
    counts = rng.poisson(activity.astype(np.float64) * scale)
    return counts, scale


def _image_from_counts(counts: np.ndarray, scale: float, psf_sigma: float) -> np.ndarray:
    if scale == 0.0:
        return np.zeros(counts.shape, dtype=np.float32)
    smoothed = gaussian_filter(
        counts.astype(np.float64), sigma=(0.0, psf_sigma, psf_sigma)
    )
    return (smoothed / scale).astype(np.float32)


def simulate_scan(
    activity: np.ndarray, protocol: ScanProtocol, seed: int | None = None
) -> np.ndarray:
    """One noisy realization of the activity, in activity units.

    E[output] is the PSF-blurred activity at any count budget; lower budgets
    just get noisier. Zero activity yields exactly zero.
    """
    counts, scale = simulate_counts(activity, protocol, seed)
    return _image_from_counts(counts, scale, protocol.psf_sigma)


def thin(count_image: np.ndarray, p: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a count image into two independent lower-count halves.

    Each count is routed to the first half with probability p, else to the
    second; the halves sum back to the input exactly and are independent
    Poisson fields with means p*lam and (1-p)*lam.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    counts = np.asarray(count_image)
    if not np.issubdtype(counts.dtype, np.integer):
        if not np.all(counts == np.floor(counts)):
            raise ValueError("thinning is defined on integer counts")
        counts = counts.astype(np.int64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    rng = np.random.default_rng(seed)
    half1 = rng.binomial(counts, p)
    return half1, counts - half1


def split_scan(
    activity: np.ndarray,
    protocol: ScanProtocol,
    seed: int | None = None,
    p: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Simulate one acquisition and rebin it into two equal-count halves.

    Returns (full_image, half1, half2), all PSF-smoothed and rescaled to
    activity units so each half is an unbiased image of the blurred
    activity, just twice as noisy as the full scan.
    """
    base = protocol.seed if seed is None else seed
    ss = np.random.SeedSequence(entropy=base, spawn_key=(7,))
    s_counts, s_thin = [int(c.generate_state(1)[0]) for c in ss.spawn(2)]
    counts, scale = simulate_counts(activity, protocol, seed=s_counts)
    h1, h2 = thin(counts, p, s_thin)
    full = _image_from_counts(counts, scale, protocol.psf_sigma)
    r1 = _image_from_counts(h1, scale * p, protocol.psf_sigma)
    r2 = _image_from_counts(h2, scale * (1.0 - p), protocol.psf_sigma)
    return full, r1, r2


def level_key(fraction: float) -> str:
    return format(float(fraction), ".6g")


@dataclass
class Study:
    """One phantom's ground truth plus noisy realizations keyed by count level."""

    truth: np.ndarray                      # [S, H, W]
    realizations: dict[str, np.ndarray]    # key -> [R, S, H, W]
    protocol: ScanProtocol
    metadata: dict = field(default_factory=dict)


def make_study(
    spec: PhantomSpec,
    protocol: ScanProtocol,
    count_levels: tuple[float, ...] = (1.0,),
    n_realizations: int = 1,
    n2n_split: bool = False,
) -> Study:
    """Generate a study: for each level fraction, n independent realizations
    at budget fraction*count_budget. With n2n_split, also rebin one full-budget
    acquisition into two equal-count halves under the key "n2n"."""
    truth = generate_phantom(spec)
    realizations: dict[str, np.ndarray] = {}
    meta_levels: dict[str, dict] = {}
    for li, frac in enumerate(count_levels):
        level_proto = ScanProtocol(
            protocol.psf_sigma, protocol.count_budget * frac, protocol.seed
        )
        seeds = []
        stack = []
        for r in range(n_realizations):
            ss = np.random.SeedSequence(
                entropy=protocol.seed, spawn_key=(spec.seed, li, r)
            )
            s = int(ss.generate_state(1)[0])
            seeds.append(s)
            stack.append(simulate_scan(truth, level_proto, seed=s))
        key = level_key(frac)
        realizations[key] = np.stack(stack)
        meta_levels[key] = {"fraction": frac, "seeds": seeds}
    metadata = {
        "spec": spec.to_dict(),
        "protocol": protocol.to_dict(),
        "levels": meta_levels,
    }
    if n2n_split:
        ss = np.random.SeedSequence(entropy=protocol.seed, spawn_key=(spec.seed, 913))
        s = int(ss.generate_state(1)[0])
        full, r1, r2 = split_scan(truth, protocol, seed=s)
        realizations["n2n"] = np.stack([r1, r2])
        realizations["full"] = full[None]
        metadata["n2n_seed"] = s
    return Study(truth, realizations, protocol, metadata)


@dataclass
class StudyPair:
    """Training material from one phantom: noisy inputs per level, one target."""

    phantom_id: int
    truth: np.ndarray
    target: np.ndarray
    inputs: dict[str, np.ndarray]  # level key -> [S, H, W]


@dataclass
class DenoiseDataset:
    train: list[StudyPair]
    val: list[StudyPair]
    count_levels: tuple[float, ...]
    protocol: ScanProtocol
    manifest: dict = field(default_factory=dict)

    def pairs(self, split: str = "train") -> list[tuple[np.ndarray, np.ndarray]]:
        """(noisy input volume, target volume) over every phantom and level."""
        studies = self.train if split == "train" else self.val
        out = []
        for sp in studies:
            for key in sorted(sp.inputs):
                out.append((sp.inputs[key], sp.target))
        return out


def build_dataset(
    specs: list[PhantomSpec],
    protocol: ScanProtocol,
    count_levels: tuple[float, ...] = DATASET_COUNT_LEVELS,
    n_val: int = 0,
) -> DenoiseDataset:
    """Per phantom: one full-budget target scan plus one noisy input per
    count level. The train/val split is by phantom, never by slice."""
    if not count_levels:
        raise ValueError("count_levels must be nonempty")
    if not 0 <= n_val <= len(specs):
        raise ValueError("n_val out of range")
    studies: list[StudyPair] = []
    for pid, spec in enumerate(specs):
        truth = generate_phantom(spec)
        ss = np.random.SeedSequence(entropy=protocol.seed, spawn_key=(spec.seed, 0))
        target = simulate_scan(truth, protocol, seed=int(ss.generate_state(1)[0]))
        inputs: dict[str, np.ndarray] = {}
        for li, frac in enumerate(count_levels):
            level_proto = ScanProtocol(
                protocol.psf_sigma, protocol.count_budget * frac, protocol.seed
            )
            ss = np.random.SeedSequence(
                entropy=protocol.seed, spawn_key=(spec.seed, 1 + li)
            )
            inputs[level_key(frac)] = simulate_scan(
                truth, level_proto, seed=int(ss.generate_state(1)[0])
            )
        studies.append(StudyPair(pid, truth, target, inputs))
    split = len(specs) - n_val
    manifest = {
        "protocol": protocol.to_dict(),
        "count_levels": list(count_levels),
        "n_val": n_val,
        "specs": [s.to_dict() for s in specs],
    }
    return DenoiseDataset(studies[:split], studies[split:], tuple(count_levels), protocol, manifest)


def random_phantom_spec(
    rng: np.random.Generator,
    height: int,
    width: int,
    slices: int = 5,
    n_lesions: int = 2,
    lesion_radius: float = 3.0,
    lesion_contrast: float = 2.0,
) -> PhantomSpec:
    """Draw a plausible random phantom: one big body ellipse, a couple of
    interior ellipses, and hot lesions inside the body."""
    cy, cx = height / 2.0, width / 2.0
    body_a = height * rng.uniform(0.30, 0.40)
    body_b = width * rng.uniform(0.30, 0.40)
    ellipses = [
        Ellipse(
            (cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2)),
            (body_a, body_b),
            rng.uniform(0.8, 1.2),
        )
    ]
    for _ in range(int(rng.integers(1, 3))):
        ellipses.append(
            Ellipse(
                (cy + rng.uniform(-0.4, 0.4) * body_a, cx + rng.uniform(-0.4, 0.4) * body_b),
                (body_a * rng.uniform(0.2, 0.45), body_b * rng.uniform(0.2, 0.45)),
                rng.uniform(0.3, 0.8),
            )
        )
    lesions = []
    for _ in range(n_lesions):
        lesions.append(
            Lesion(
                (
                    cy + rng.uniform(-0.5, 0.5) * body_a,
                    cx + rng.uniform(-0.5, 0.5) * body_b,
                ),
                lesion_radius,
                lesion_contrast,
            )
        )
    return PhantomSpec(
        height, width, slices, tuple(ellipses), tuple(lesions),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def lesion_voxels(spec: PhantomSpec) -> np.ndarray:
    """[K, 3] (s, y, x) indices of every voxel inside any lesion disk."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    out = []
    for s in range(spec.slices):
        f = _slice_factor(s, spec.slices)
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        for l in spec.lesions:
            cy, cx = l.center
            r = l.radius * f
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        ys, xs = np.nonzero(mask)
        out.extend((s, y, x) for y, x in zip(ys, xs))
    if not out:
        raise ValueError("spec has no lesion voxels")
    return np.array(out, dtype=np.int64)


def background_voxels(spec: PhantomSpec, margin: float = 3.0) -> np.ndarray:
    """[K, 3] indices inside the first (body) ellipse, away from any lesion."""
    if not spec.ellipses:
        raise ValueError("spec has no background ellipse")
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    body = spec.ellipses[0]
    out = []
    for s in range(spec.slices):
        f = _slice_factor(s, spec.slices)
        cy, cx = body.center
        a, b = body.axes[0] * f * 0.8, body.axes[1] * f * 0.8
        mask = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
        for e in spec.ellipses[1:]:
            ecy, ecx = e.center
            ea, eb = e.axes[0] * f + margin, e.axes[1] * f + margin
            mask &= ((yy - ecy) / ea) ** 2 + ((xx - ecx) / eb) ** 2 > 1.0
        for l in spec.lesions:
            lcy, lcx = l.center
            r = l.radius * f + margin
            mask &= (yy - lcy) ** 2 + (xx - lcx) ** 2 > r * r
        ys, xs = np.nonzero(mask)
        out.extend((s, y, x) for y, x in zip(ys, xs))
    if not out:
        raise ValueError("background region is empty")
    return np.array(out, dtype=np.int64)


def save_dataset(dataset: DenoiseDataset, directory) -> None:
    """One subdirectory per phantom (raw float32 tensors + meta), plus a
    dataset manifest sufficient to regenerate everything from seeds."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for sp in dataset.train + dataset.val:
        sub = d / f"phantom_{sp.phantom_id:03d}"
        sub.mkdir(exist_ok=True)
        _write_f32(sub / "truth.f32", sp.truth)
        _write_f32(sub / "target.f32", sp.target)
        files = {"truth": "truth.f32", "target": "target.f32"}
        for key, vol in sp.inputs.items():
            fname = f"input_{key}.f32"
            files[key] = fname
            _write_f32(sub / fname, vol)
        (sub / "meta.json").write_text(
            json.dumps(
                {
                    "phantom_id": sp.phantom_id,
                    "shape": list(sp.truth.shape),
                    "files": files,
                    "levels": sorted(sp.inputs),
                },
                indent=2,
                sort_keys=True,
            )
        )
        entries.append(sub.name)
    doc = dict(dataset.manifest)
    doc["phantom_dirs"] = entries
    (d / "dataset.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_dataset(directory) -> DenoiseDataset:
    d = Path(directory)
    doc = json.loads((d / "dataset.json").read_text())
    protocol = ScanProtocol.from_dict(doc["protocol"])
    studies = []
    for name in doc["phantom_dirs"]:
        sub = d / name
        meta = json.loads((sub / "meta.json").read_text())
        shape = meta["shape"]
        truth = _read_f32(sub / meta["files"]["truth"], shape)
        target = _read_f32(sub / meta["files"]["target"], shape)
        inputs = {
            key: _read_f32(sub / meta["files"][key], shape) for key in meta["levels"]
        }
        studies.append(StudyPair(meta["phantom_id"], truth, target, inputs))
    n_val = doc.get("n_val", 0)
    split = len(studies) - n_val
    return DenoiseDataset(
        studies[:split],
        studies[split:],
        tuple(doc["count_levels"]),
        protocol,
        {k: v for k, v in doc.items() if k != "phantom_dirs"},
    )


def save_study(study: Study, directory) -> None:
    """Raw little-endian float32 tensors plus a JSON sidecar manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"truth": "truth.f32"}
    _write_f32(d / "truth.f32", study.truth)
    for key, stack in study.realizations.items():
        fname = f"real_{key}.f32"
        files[key] = fname
        _write_f32(d / fname, stack)
    meta = {
        "shape": list(study.truth.shape),
        "realization_shapes": {k: list(v.shape) for k, v in study.realizations.items()},
        "files": files,
        "protocol": study.protocol.to_dict(),
        "metadata": study.metadata,
    }
    (d / "study.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_study(directory) -> Study:
    d = Path(directory)
    meta = json.loads((d / "study.json").read_text())
    truth = _read_f32(d / meta["files"]["truth"], meta["shape"])
    realizations = {}
    for key, shape in meta["realization_shapes"].items():
        realizations[key] = _read_f32(d / meta["files"][key], shape)
    return Study(
        truth,
        realizations,
        ScanProtocol.from_dict(meta["protocol"]),
        meta.get("metadata", {}),
    )


def _write_f32(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path, shape) -> np.ndarray:
    raw = Path(path).read_bytes()
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} float32 values, got {arr.size}")
    return arr.reshape(shape).copy()
