"""Synthetic interferogram stacks with known scatterer classes.

Randomness comes from numpy's PCG64 bit generator seeded with the scene seed;
draws happen in a fixed order over whole arrays (amplitude, coherence, phase
noise, uniform phase), so a seed fully determines the stack.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .stack_io import EliteMask, InterferogramStack, wrap_phase

GENERATOR = "numpy.PCG64"


class Scatterer(enum.IntEnum):
    PS = 0
    DS = 1
    DECORRELATED = 2
    WATER = 3


@dataclass(frozen=True)
class ClassParams:
    amp_mean: float
    amp_jitter: float
    coh_mean: float
    coh_jitter: float
    phase_noise: Optional[float]  # None: phase uniform on [-pi, pi)

    def check(self, name: str) -> None:
        if self.amp_mean < 0 or self.amp_jitter < 0 or self.coh_jitter < 0:
            raise ValueError(f"{name}: amplitude mean and jitters must be >= 0")
        if not 0 <= self.coh_mean <= 1:
            raise ValueError(f"{name}: coherence mean must lie in [0, 1]")
        if self.phase_noise is not None and self.phase_noise < 0:
            raise ValueError(f"{name}: phase noise must be >= 0")


def default_class_params() -> dict[Scatterer, ClassParams]:
    raw = json.loads(resources.files("elitepix.data").joinpath("default_classes.json").read_text())
    return {Scatterer[k]: ClassParams(**v) for k, v in raw.items()}


@dataclass
class SceneSpec:
    region_map: np.ndarray
    epochs: int
    seed: int = 0
    class_params: dict = field(default_factory=default_class_params)
    deformation_rate: float = 0.0

    @property
    def height(self) -> int:
        return self.region_map.shape[0]

    @property
    def width(self) -> int:
        return self.region_map.shape[1]

    def check(self) -> None:
        rm = np.asarray(self.region_map)
        if rm.ndim != 2 or rm.size == 0:
            raise ValueError(f"region map must be a non-empty 2-D array, got shape {rm.shape}")
        if not np.isin(rm, [c.value for c in Scatterer]).all():
            raise ValueError("region map holds values outside the scatterer classes")
        if self.epochs < 2:
            raise ValueError(f"epochs must be >= 2, got {self.epochs}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        for cls in np.unique(rm):
            if Scatterer(cls) not in self.class_params:
                raise ValueError(f"no parameters for class {Scatterer(cls).name}")
        for cls, p in self.class_params.items():
            p.check(Scatterer(cls).name)


def make_region_map(height: int, width: int, seed: int = 0, block: int = 20,
                    background: Optional[dict] = None, ps_density: float = 0.05,
                    urban_fraction: float = 0.2, urban_ps_density: float = 0.5) -> np.ndarray:
    """Blocky land-cover layout with point-like PS sprinkled over land.

    Blocks are drawn from ``background`` (class name -> weight); a share of
    land blocks is marked urban and receives PS at ``urban_ps_density``.
    """
    background = background or {"DS": 0.4, "DECORRELATED": 0.4, "WATER": 0.2}
    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(background)
    weights = np.array([background[n] for n in names], dtype=np.float64)
    weights = weights / weights.sum()
    codes = np.array([Scatterer[n].value for n in names])
    bh, bw = -(-height // block), -(-width // block)
    blocks = codes[rng.choice(len(codes), size=(bh, bw), p=weights)]
    urban = rng.random((bh, bw)) < urban_fraction
    region = np.repeat(np.repeat(blocks, block, 0), block, 1)[:height, :width]
    urban = np.repeat(np.repeat(urban, block, 0), block, 1)[:height, :width]
    land = region != Scatterer.WATER
    density = np.where(urban, urban_ps_density, ps_density)
    ps = land & (rng.random((height, width)) < density)
    region = np.where(ps, Scatterer.PS.value, region)
    return region.astype(np.uint8)


def generate_scene(spec: SceneSpec) -> tuple[InterferogramStack, EliteMask]:
    spec.check()
    rm = np.asarray(spec.region_map)
    n_t, (h, w) = spec.epochs, rm.shape
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    amp_noise = rng.standard_normal((n_t, h, w))
    coh_noise = rng.standard_normal((n_t, h, w))
    ph_noise = rng.standard_normal((n_t, h, w))
    ph_uniform = rng.uniform(-np.pi, np.pi, (n_t, h, w))

    def per_pixel(attr):
        lut = np.zeros(len(Scatterer))
        for cls, p in spec.class_params.items():
            v = getattr(p, attr)
            lut[int(cls)] = np.nan if v is None else v
        return lut[rm]

    amp = per_pixel("amp_mean") * (1.0 + per_pixel("amp_jitter") * amp_noise)
    amp = np.maximum(amp, 0.0)
    coh = np.clip(per_pixel("coh_mean") + per_pixel("coh_jitter") * coh_noise, 0.0, 1.0)
    sigma = per_pixel("phase_noise")
    ramp = spec.deformation_rate * np.arange(n_t, dtype=np.float64)[:, None, None]
    coherent = ramp + np.nan_to_num(sigma) * ph_noise
    phase = np.where(np.isnan(sigma)[None], ph_uniform, coherent)

    stack = InterferogramStack(amp.astype(np.float32), wrap_phase(phase),
                               coh.astype(np.float32), {"generator": GENERATOR})
    truth = EliteMask.full(np.isin(rm, [Scatterer.PS, Scatterer.DS]))
    return stack, truth


def class_histogram(region_map: np.ndarray) -> dict[str, int]:
    return {c.name: int(np.count_nonzero(region_map == c)) for c in Scatterer}


def _class_params_from_json(raw: dict) -> dict[Scatterer, ClassParams]:
    params = default_class_params()
    for name, overrides in (raw or {}).items():
        base = params[Scatterer[name]].__dict__.copy()
        base.update(overrides)
        params[Scatterer[name]] = ClassParams(**base)
    return params


def scene_spec_from_dict(raw: dict) -> SceneSpec:
    """Build a SceneSpec from its JSON form.

    Either ``region_map`` (rows of class names or codes) or ``height``/``width``
    with an optional ``layout`` block for :func:`make_region_map`.
    """
    seed = int(raw.get("seed", 0))
    if "region_map" in raw:
        rows = [[Scatterer[v].value if isinstance(v, str) else int(v) for v in row]
                for row in raw["region_map"]]
        region = np.array(rows, dtype=np.uint8)
    else:
        layout = dict(raw.get("layout", {}))
        layout.setdefault("seed", seed)
        region = make_region_map(int(raw["height"]), int(raw["width"]), **layout)
    spec = SceneSpec(region_map=region, epochs=int(raw["epochs"]), seed=seed,
                     class_params=_class_params_from_json(raw.get("classes")),
                     deformation_rate=float(raw.get("deformation_rate", 0.0)))
    spec.check()
    return spec


def load_scene_spec(path) -> SceneSpec:
    with open(path) as fh:
        return scene_spec_from_dict(json.load(fh))
