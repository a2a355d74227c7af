"""Synthetic moving/fixed pairs with known sampling fields and label maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import tensor as T
from .deformation import A_MAX, identity_grid, integrate, warp
from .volume_io import LabelMap, Volume, load_volume, save_volume

MANIFEST_NAME = "manifest.jsonl"
CASE_KEYS = ("moving", "fixed", "moving_seg", "fixed_seg", "phi_gt")


@dataclass
class SynthSpec:
    shape: tuple = (32, 32, 32)
    n_labels: int = 2
    n_distractors: int = 2
    amplitude: float = 0.3
    smoothing: int = 7
    noise: float = 0.02
    radius: tuple = (5.0, 9.0)
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.radius = tuple(float(r) for r in self.radius)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValueError(f"shape must be three extents >= 4, got {self.shape}")
        if not 0 <= self.amplitude < A_MAX - 1:
            raise ValueError(f"amplitude must lie in [0, {A_MAX - 1}), got {self.amplitude}")
        if self.n_labels < 1 or self.n_distractors < 0:
            raise ValueError("need at least one labelled structure")
        if self.smoothing < 1 or self.noise < 0:
            raise ValueError("smoothing must be >= 1 and noise >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["radius"] = list(self.radius)
        return d


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    # three box passes approximate a gaussian
    for _ in range(3):
        x = uniform_filter(x, size=width, mode="reflect")
    return x


def gen_field(spec: SynthSpec, rng: np.random.Generator | None = None):
    """Ground-truth increments ``g`` in ``[1-amp, 1+amp]`` and their integrated field."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    noise = rng.standard_normal((3,) + spec.shape)
    s = np.stack([_smooth(n, spec.smoothing) for n in noise])
    sd = s.std()
    s = s / sd if sd > 0 else s
    amp = spec.amplitude
    g = np.clip(1.0 + amp * s, 1.0 - amp, 1.0 + amp).astype(np.float32)
    phi = integrate(T.Tensor(g)).data
    return g, phi


def _blobs(spec: SynthSpec, rng: np.random.Generator):
    grid = identity_grid(spec.shape, np.float64)
    base = 0.25
    image = np.full(spec.shape, base)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    lo, hi = spec.radius
    for b in range(spec.n_labels + spec.n_distractors):
        radii = rng.uniform(lo, hi, size=3)
        if b >= spec.n_labels:
            radii = radii * 0.6
        center = np.array([rng.uniform(r + 1, n - r - 2) if n - r - 2 > r + 1 else n / 2
                           for r, n in zip(radii, spec.shape)])
        r2 = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        # half maximum sits exactly on the ellipsoid surface r2 == 1
        bump = rng.uniform(0.4, 0.6) * np.exp(-np.log(2.0) * r2)
        image = np.maximum(image, base + bump)
        if b < spec.n_labels:
            labels[r2 <= 1.0] = b + 1
    # two-scale tissue-like texture with standard deviation spec.texture
    tex = sum(_smooth(rng.standard_normal(spec.shape), w) for w in (3, 7))
    tex *= spec.texture / max(tex.std(), 1e-12)
    return np.clip(image + tex, 0.0, 1.0).astype(np.float32), labels


def gen_pair(spec: SynthSpec, rng: np.random.Generator | None = None):
    """Return ``(M, F, M_seg, F_seg, phi_gt)``.

    ``F`` is ``M`` resampled at ``phi_gt``, so warping ``M`` (or ``M_seg``
    with nearest interpolation) by ``phi_gt`` reproduces ``F`` (``F_seg``).
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    image, labels = _blobs(spec, rng)
    _, phi = gen_field(spec, rng)
    k = spec.n_labels + 1
    m = Volume(image[None], modality="SYNTH")
    m_seg = LabelMap(labels, k)
    f_data = T.trilinear_sample(T.Tensor(image[None]), T.Tensor(phi)).data
    if spec.noise > 0:
        f_data = f_data + spec.noise * rng.standard_normal(f_data.shape).astype(np.float32)
    f = Volume(np.clip(f_data, 0.0, 1.0).astype(np.float32), modality="SYNTH")
    f_seg = warp(m_seg, phi, mode="nearest")
    return m, f, m_seg, f_seg, phi


def case_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_dataset(spec: SynthSpec, n: int, out_dir, prefix: str = "case") -> Path:
    """Write ``n`` pairs plus ``manifest.jsonl`` into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, cs in enumerate(case_seeds(spec.seed, n)):
        cid = f"{prefix}_{i:03d}"
        m, f, m_seg, f_seg, phi = gen_pair(spec, np.random.default_rng(cs))
        paths = {key: f"{cid}_{key}.gvol" for key in CASE_KEYS}
        save_volume(m, out / paths["moving"])
        save_volume(f, out / paths["fixed"])
        save_volume(m_seg, out / paths["moving_seg"])
        save_volume(f_seg, out / paths["fixed_seg"])
        save_volume(Volume(phi, modality="SYNTH"), out / paths["phi_gt"], field_tag="phi")
        records.append({"case": cid, **paths})
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return manifest


def read_manifest(path) -> list:
    """Records with paths resolved against the manifest's directory."""
    path = Path(path)
    root = path.parent
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "case" not in rec or "moving" not in rec or "fixed" not in rec:
            raise ValueError(f"{path}:{line_no}: record needs case, moving and fixed")
        records.append({k: (str(root / v) if k != "case" and v else v) for k, v in rec.items()})
    return records


def load_case(rec: dict) -> dict:
    return {k: (load_volume(v) if k != "case" else v) for k, v in rec.items()}
