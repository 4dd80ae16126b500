"""Deterministic multi-domain shape benchmark with a controllable spurious cue.

Each class is a (shape, fill color) pair rendered as a glyph over a
domain-styled background (texture family + palette), so the genuine class
evidence lives on the glyph itself. With probability ``spurious_strength`` the
background hue is additionally a fixed function of the class, which makes
background color predictive inside source domains; the domain designated as
held out is always generated with that probability forced to 0, so the
background cue breaks at test time while the glyph cue transfers.

Every sample's randomness is derived from (seed, domain, index), so generation
is reproducible sample-by-sample and the drawn parameters can be re-derived by
tests via ``sample_params``.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from matplotlib.path import Path as MplPath

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError
from .imgops import gaussian_blur

VAL_FRACTION = 0.10
SUPERSAMPLE = 4

GLYPHS = ("triangle", "square", "pentagon", "star", "disc")
TEXTURES = ("flat", "stripes", "checker", "noise")

# glyph fill hue/value jitter: keeps the fill predictive but non-constant
GLYPH_HUE_JITTER = 0.04
GLYPH_VALUE_RANGE = (0.85, 1.0)
GLYPH_SATURATION = 0.9

# per-domain background style: (saturation, value_lo, value_hi); backgrounds
# stay darker than the glyph so the class evidence is the brightest region
DOMAIN_STYLE = [
    (0.90, 0.10, 0.40),
    (0.70, 0.15, 0.45),
    (0.80, 0.10, 0.35),
    (0.60, 0.15, 0.40),
]


@dataclass
class DatasetSpec:
    num_classes: int = 5
    num_domains: int = 4
    samples_per_domain: int = 600
    image_size: int = 32
    spurious_strength: float = 0.9
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ConfigError(
                f"spurious_strength must be in [0,1], got {self.spurious_strength}")
        if self.samples_per_domain < self.num_classes:
            raise ConfigError("samples_per_domain must cover every class")
        if self.image_size < 8:
            raise ConfigError(f"image_size too small: {self.image_size}")


@dataclass
class LabeledSample:
    image: np.ndarray              # [3, S, S] float64 in [0,1]
    y: int                         # class label in [0, K)
    d: int                         # domain label in [0, N)
    sample_id: str
    provenance: dict | None = None


@dataclass
class DatasetBundle:
    spec: DatasetSpec
    domains: list                  # list (per domain) of list[LabeledSample]
    train_idx: list                # per domain: indices into the sample list
    val_idx: list
    manifest: dict = field(default_factory=dict)

    def domain_samples(self, d, split=None):
        if split is None:
            return list(self.domains[d])
        idx = self.train_idx[d] if split == "train" else self.val_idx[d]
        return [self.domains[d][i] for i in idx]

    def all_samples(self, domains=None, split=None):
        doms = range(len(self.domains)) if domains is None else domains
        out = []
        for d in doms:
            out.extend(self.domain_samples(d, split))
        return out


def class_hue(y, num_classes):
    return (y + 0.5) / num_classes


def glyph_hue(y, num_classes):
    """Fill hue for class ``y``; offset half the wheel from the class hue so
    the glyph cue and the background cue occupy distinct colors."""
    return (class_hue(y, num_classes) + 0.5) % 1.0


def sample_params(spec, domain, index, heldout_domain=None):
    """Re-derivable per-sample draw record for domain ``domain``, index ``index``."""
    rng = np.random.default_rng([spec.seed, 1000 + domain, index])
    k = spec.num_classes
    y = index % k
    s = spec.image_size
    params = {
        "y": y,
        "domain": domain,
        "center": (float(rng.uniform(0.32, 0.68) * s),
                   float(rng.uniform(0.32, 0.68) * s)),
        "radius": float(rng.uniform(0.20, 0.30) * s),
        "rotation": float(rng.uniform(0.0, 2 * np.pi)),
        "glyph": GLYPHS[y % len(GLYPHS)],
        "glyph_hue": float((glyph_hue(y, k)
                            + rng.uniform(-GLYPH_HUE_JITTER, GLYPH_HUE_JITTER))
                           % 1.0),
        "glyph_value": float(rng.uniform(*GLYPH_VALUE_RANGE)),
        "texture": TEXTURES[domain % len(TEXTURES)],
        "tex_angle": float(rng.uniform(0.0, np.pi)),
        "tex_phase": float(rng.uniform(0.0, 2 * np.pi)),
        "tex_freq": float(rng.uniform(3.0, 6.0)),
        "checker_size": int(rng.integers(3, 7)),
        "noise_seed": int(rng.integers(2 ** 31)),
    }
    spurious_draw = rng.uniform()
    rho = 0.0 if domain == heldout_domain else spec.spurious_strength
    if spurious_draw < rho:
        params["bg_hue"] = class_hue(y, k)
        params["spurious"] = True
    else:
        params["bg_hue"] = float(rng.uniform())
        params["spurious"] = False
    return params


def _glyph_mask(params, size):
    """Soft [size,size] coverage mask for the glyph, via 4x supersampling."""
    ss = size * SUPERSAMPLE
    coords = (np.arange(ss) + 0.5) / SUPERSAMPLE
    xx, yy = np.meshgrid(coords, coords)
    cx, cy = params["center"]
    r = params["radius"]
    rot = params["rotation"]
    kind = params["glyph"]
    if kind == "disc":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    else:
        if kind == "triangle":
            angles = rot + 2 * np.pi * np.arange(3) / 3
            radii = np.full(3, r)
        elif kind == "square":
            angles = rot + 2 * np.pi * np.arange(4) / 4
            radii = np.full(4, r)
        elif kind == "pentagon":
            angles = rot + 2 * np.pi * np.arange(5) / 5
            radii = np.full(5, r)
        elif kind == "star":
            angles = rot + 2 * np.pi * np.arange(10) / 10
            radii = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        else:
            raise ConfigError(f"unknown glyph kind '{kind}'")
        verts = np.stack([cx + radii * np.cos(angles),
                          cy + radii * np.sin(angles)], axis=1)
        path = MplPath(verts, closed=False)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        inside = path.contains_points(pts).reshape(ss, ss)
    fine = inside.astype(np.float64)
    return fine.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _texture_field(params, size):
    coords = np.arange(size) + 0.5
    xx, yy = np.meshgrid(coords, coords)
    kind = params["texture"]
    if kind == "flat":
        return np.ones((size, size))
    if kind == "stripes":
        proj = xx * np.cos(params["tex_angle"]) + yy * np.sin(params["tex_angle"])
        return 0.5 + 0.5 * np.cos(2 * np.pi * params["tex_freq"] * proj / size
                                  + params["tex_phase"])
    if kind == "checker":
        cs = params["checker_size"]
        return (((xx // cs) + (yy // cs)) % 2).astype(np.float64)
    if kind == "noise":
        rng = np.random.default_rng(params["noise_seed"])
        field_ = rng.uniform(size=(size, size))
        return gaussian_blur(field_, size=5, sigma=1.0)
    raise ConfigError(f"unknown texture kind '{kind}'")


def render_sample(spec, domain, index, heldout_domain=None):
    params = sample_params(spec, domain, index, heldout_domain)
    size = spec.image_size
    style = DOMAIN_STYLE[domain % len(DOMAIN_STYLE)]
    sat, v_lo, v_hi = style
    base = np.array(colorsys.hsv_to_rgb(params["bg_hue"], sat, 1.0))
    tex = _texture_field(params, size)
    value = v_lo + (v_hi - v_lo) * tex
    bg = base[:, None, None] * value[None, :, :]
    mask = _glyph_mask(params, size)[None, :, :]
    fg = np.array(colorsys.hsv_to_rgb(params["glyph_hue"], GLYPH_SATURATION,
                                      params["glyph_value"]))[:, None, None]
    img = mask * fg + (1.0 - mask) * bg
    return np.clip(img, 0.0, 1.0), params


def generate(spec, heldout_domain=None):
    """Render the full benchmark; the held-out domain gets no spurious cue."""
    spec.validate()
    if heldout_domain is not None and not 0 <= heldout_domain < spec.num_domains:
        raise ConfigError(f"heldout_domain {heldout_domain} out of range")
    domains, train_idx, val_idx = [], [], []
    for d in range(spec.num_domains):
        samples = []
        for i in range(spec.samples_per_domain):
            img, params = render_sample(spec, d, i, heldout_domain)
            samples.append(LabeledSample(image=img, y=params["y"], d=d,
                                         sample_id=f"d{d}s{i}"))
        domains.append(samples)
        rng = np.random.default_rng([spec.seed, 2000 + d])
        order = rng.permutation(spec.samples_per_domain)
        n_val = int(round(VAL_FRACTION * spec.samples_per_domain))
        val_idx.append(sorted(int(i) for i in order[:n_val]))
        train_idx.append(sorted(int(i) for i in order[n_val:]))
    manifest = {"format": "mire-dataset-v1", "spec": asdict(spec),
                "heldout_domain": heldout_domain}
    return DatasetBundle(spec=spec, domains=domains, train_idx=train_idx,
                         val_idx=val_idx, manifest=manifest)


# -- on-disk format -----------------------------------------------------------

def save(bundle, path):
    """Dataset directory: manifest.json + one image shard per domain."""
    os.makedirs(path, exist_ok=True)
    manifest = dict(bundle.manifest)
    manifest["spec"] = asdict(bundle.spec)
    manifest["train_idx"] = bundle.train_idx
    manifest["val_idx"] = bundle.val_idx
    manifest["records"] = []
    for d, samples in enumerate(bundle.domains):
        manifest["records"].append([
            {"id": s.sample_id, "y": s.y, "d": s.d, "provenance": s.provenance}
            for s in samples])
        with open(os.path.join(path, f"domain_{d}.bin"), "wb") as fh:
            for s in samples:
                T.write_array(fh, s.image)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)


def load(path):
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt dataset manifest in {path}: {e}") from e
    if manifest.get("format") != "mire-dataset-v1":
        raise FormatError(f"unknown dataset format in {path}")
    spec = DatasetSpec(**manifest["spec"])
    domains = []
    for d, records in enumerate(manifest["records"]):
        samples = []
        with open(os.path.join(path, f"domain_{d}.bin"), "rb") as fh:
            for rec in records:
                img = T.read_array(fh)
                samples.append(LabeledSample(image=img, y=rec["y"], d=rec["d"],
                                             sample_id=rec["id"],
                                             provenance=rec["provenance"]))
            if fh.read(1):
                raise FormatError(
                    f"domain_{d}.bin has trailing data beyond manifest count")
        if len(samples) != len(records):
            raise FormatError(f"domain_{d}.bin sample count mismatch")
        domains.append(samples)
    bundle = DatasetBundle(spec=spec, domains=domains,
                           train_idx=manifest["train_idx"],
                           val_idx=manifest["val_idx"])
    bundle.manifest = {k: manifest[k] for k in manifest
                       if k not in ("records", "train_idx", "val_idx")}
    return bundle


# -- batching -----------------------------------------------------------------

def batches(bundle, batch_size=16, seed=0, epoch=0, domains=None, split="train",
            stratified=True):
    """Yield (images [B,3,S,S], y [B], d [B], ids) with a seeded per-epoch
    shuffle. In stratified mode samples are interleaved domain-round-robin so
    every full batch of size >= #domains touches every domain."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    doms = list(range(len(bundle.domains))) if domains is None else list(domains)
    rng = np.random.default_rng([seed, 3000 + epoch])
    per_domain = []
    for d in doms:
        samples = bundle.domain_samples(d, split)
        if stratified:
            order = rng.permutation(len(samples))
            per_domain.append([samples[i] for i in order])
    if stratified:
        ordered = []
        pools = [list(p) for p in per_domain]
        while any(pools):
            for p in pools:
                if p:
                    ordered.append(p.pop())
    else:
        ordered = bundle.all_samples(doms, split)
        order = rng.permutation(len(ordered))
        ordered = [ordered[i] for i in order]
    if not ordered:
        raise ContractError(f"no samples in split '{split}' for domains {doms}")
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        ys = np.array([s.y for s in chunk])
        ds = np.array([s.d for s in chunk])
        ids = [s.sample_id for s in chunk]
        yield images, ys, ds, ids
