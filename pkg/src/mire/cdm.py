"""Category-aware data mixing: background construction and recombination.

A mixed sample keeps the foreground image's class label and replaces its
background, pixel-weighted by the merged saliency mask, with a blurred,
randomly cropped, resized patch from an image of another domain.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .imgops import bilinear_resize, crop_square, gaussian_blur
from .saliency import ForegroundMask, SaliencyConfig, grad_cam_batch, merge_masks
from .synthdata import DatasetBundle, LabeledSample


@dataclass
class MixConfig:
    crop_area_ratio: float = 1.0 / 8.0
    gaussian_size: int = 5
    gaussian_sigma: float = 1.5
    seed: int = 0

    def validate(self):
        if not 0.0 < self.crop_area_ratio <= 1.0:
            raise ConfigError(
                f"crop_area_ratio must be in (0,1], got {self.crop_area_ratio}")
        if self.gaussian_size % 2 != 1:
            raise ConfigError(
                f"gaussian kernel size must be odd, got {self.gaussian_size}")


@dataclass
class MixedSample:
    image: np.ndarray
    y: int
    foreground_id: str
    background_id: str
    background_domain: int


def crop_side(image_size, crop_area_ratio):
    side = int(round(image_size * np.sqrt(crop_area_ratio)))
    return max(1, min(side, image_size))


def make_background(xj, cfg, rng=None, center=False, blur=True):
    """Blur, crop a seeded-uniform square of the configured area ratio, and
    bilinearly resize back to full size."""
    cfg.validate()
    rng = rng or np.random.default_rng(cfg.seed)
    h, w = xj.shape[-2], xj.shape[-1]
    if h != w:
        raise ShapeError(f"make_background expects square images, got {h}x{w}")
    blurred = gaussian_blur(xj, cfg.gaussian_size, cfg.gaussian_sigma) if blur else xj
    side = crop_side(h, cfg.crop_area_ratio)
    if center:
        top = left = (h - side) // 2
    else:
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    patch = crop_square(blurred, top, left, side)
    return bilinear_resize(patch, h, w)


def mix(xi, mask, bg, y=0, foreground_id="", background_id="", background_domain=-1):
    """x_mix = mask * xi + (1 - mask) * bg, mask broadcast over channels."""
    m = mask.values if isinstance(mask, ForegroundMask) else np.asarray(mask)
    if m.shape != xi.shape[-2:] or xi.shape != bg.shape:
        raise ShapeError(f"mix shape mismatch: image {xi.shape}, mask {m.shape}, "
                         f"background {bg.shape}")
    mixed = m[None] * xi + (1.0 - m[None]) * bg
    return MixedSample(image=mixed, y=y, foreground_id=foreground_id,
                       background_id=background_id,
                       background_domain=background_domain)


def _foreground_masks(bundle_nets, samples, sal_cfg, mask_mode, domain_map):
    """Merged masks for a list of samples, Grad-CAM run in batches."""
    masks = []
    bs = 64
    for start in range(0, len(samples), bs):
        chunk = samples[start:start + bs]
        images = np.stack([s.image for s in chunk])
        ys = np.array([s.y for s in chunk])
        ds = np.array([domain_map[s.d] for s in chunk])
        mc = grad_cam_batch(bundle_nets, images, ys, "class", sal_cfg)
        md = grad_cam_batch(bundle_nets, images, ds, "domain", sal_cfg)
        for i in range(len(chunk)):
            a = np.zeros_like(mc[i]) if mask_mode == "no_mc" else mc[i]
            if mask_mode == "no_md":
                b = np.zeros_like(md[i])
            elif mask_mode == "invert_md":
                b = 1.0 - md[i]
            else:
                b = md[i]
            masks.append(merge_masks(a, b, sal_cfg))
    return masks


def augment_dataset(bundle, nets, cfg=None, sal_cfg=None, source_domains=None,
                    mask_mode="default", blur=True):
    """Produce N-1 mixed variants per source image (one per other source
    domain as background donor) and return originals plus mixed.

    ``nets`` must have its class and domain heads trained (phase 0). The
    domain head indexes source domains in the order of ``source_domains``.
    """
    cfg = cfg or MixConfig()
    cfg.validate()
    sal_cfg = sal_cfg or SaliencyConfig()
    doms = list(range(len(bundle.domains))) if source_domains is None \
        else list(source_domains)
    if len(doms) < 2:
        raise ContractError("augment_dataset needs at least two source domains")
    domain_map = {d: i for i, d in enumerate(doms)}

    new_bundle = DatasetBundle(
        spec=bundle.spec,
        domains=[list(samples) for samples in bundle.domains],
        train_idx=[list(ix) for ix in bundle.train_idx],
        val_idx=[list(ix) for ix in bundle.val_idx],
        manifest=copy.deepcopy(bundle.manifest))

    for d in doms:
        originals = bundle.domain_samples(d)
        masks = _foreground_masks(nets, originals, sal_cfg, mask_mode, domain_map)
        donors = {dd: bundle.domain_samples(dd) for dd in doms if dd != d}
        for si, (sample, mask) in enumerate(zip(originals, masks)):
            for dd in sorted(donors):
                rng = np.random.default_rng(
                    [cfg.seed, 4000 + d, si, dd])
                donor = donors[dd][int(rng.integers(len(donors[dd])))]
                bg = make_background(donor.image, cfg, rng=rng, blur=blur)
                mixed = mix(sample.image, mask, bg, y=sample.y,
                            foreground_id=sample.sample_id,
                            background_id=donor.sample_id,
                            background_domain=dd)
                idx = len(new_bundle.domains[d])
                new_bundle.domains[d].append(LabeledSample(
                    image=np.clip(mixed.image, 0.0, 1.0), y=sample.y, d=d,
                    sample_id=f"mix_{sample.sample_id}_bg{dd}",
                    provenance={"foreground": sample.sample_id,
                                "background": donor.sample_id,
                                "background_domain": dd}))
                new_bundle.train_idx[d].append(idx)
    new_bundle.manifest["augmented"] = True
    return new_bundle


def count_mixed(bundle, domains=None):
    return sum(1 for s in bundle.all_samples(domains) if s.provenance is not None)
