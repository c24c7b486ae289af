"""Datasets: CIFAR-100 binary files, a synthetic clustered image set, batching."""

from __future__ import annotations

import colorsys
import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

RECORD_BYTES = 3074  # coarse label, fine label, 32*32*3 pixels
CIFAR_SIDE = 32
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

CIFAR100_FINE_NAMES = (
    "apple aquarium_fish baby bear beaver bed bee beetle bicycle bottle bowl boy bridge bus "
    "butterfly camel can castle caterpillar cattle chair chimpanzee clock cloud cockroach couch "
    "crab crocodile cup dinosaur dolphin elephant flatfish forest fox girl hamster house kangaroo "
    "keyboard lamp lawn_mower leopard lion lizard lobster man maple_tree motorcycle mountain mouse "
    "mushroom oak_tree orange orchid otter palm_tree pear pickup_truck pine_tree plain plate poppy "
    "porcupine possum rabbit raccoon ray road rocket rose sea seal shark shrew skunk skyscraper "
    "snail snake spider squirrel streetcar sunflower sweet_pepper table tank telephone television "
    "tiger tractor train trout tulip turtle wardrobe whale willow_tree wolf woman worm"
).split()


class CorruptFileError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, H, W], values in [0, 1] unless normalized
    fine_labels: np.ndarray
    class_names: list[str]
    provenance: str  # "cifar100" or "synthetic"
    coarse_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fine_labels = np.asarray(self.fine_labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.fine_labels.shape[0]:
            raise ValueError(f"images {self.images.shape} vs labels {self.fine_labels.shape}")
        if self.fine_labels.size and (self.fine_labels.min() < 0
                                      or self.fine_labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return self.fine_labels

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.fine_labels[idx], list(self.class_names),
                       self.provenance,
                       None if self.coarse_labels is None else self.coarse_labels[idx],
                       dict(self.meta))


# -- CIFAR-100 binary -----------------------------------------------------------


def decode_cifar100_binary(raw: bytes) -> Dataset:
    if len(raw) % RECORD_BYTES:
        raise CorruptFileError(f"{len(raw)} bytes is not a multiple of the {RECORD_BYTES}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    if (fine >= 100).any() or (coarse >= 20).any():
        raise CorruptFileError("label byte out of range")
    pixels = rec[:, 2:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = pixels.astype(np.float32) / 255.0
    return Dataset(images, fine, list(CIFAR100_FINE_NAMES), "cifar100", coarse)


def load_cifar100_binary(path: str | os.PathLike) -> Dataset:
    """Read a ``train.bin`` / ``test.bin`` file from the CIFAR-100 binary distribution."""
    with open(path, "rb") as fh:
        ds = decode_cifar100_binary(fh.read())
    ds.meta["path"] = str(path)
    return ds


def encode_cifar100_binary(images: np.ndarray, fine_labels, coarse_labels) -> bytes:
    """Inverse of :func:`decode_cifar100_binary`; ``images`` in [0, 1] or uint8."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n = images.shape[0]
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"expected [n, 3, 32, 32] images, got {images.shape}")
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(coarse_labels, dtype=np.uint8)
    rec[:, 1] = np.asarray(fine_labels, dtype=np.uint8)
    rec[:, 2:] = images.reshape(n, -1)
    return rec.tobytes()


def class_subset(ds: Dataset, classes) -> Dataset:
    """Keep only ``classes`` (in the given order) and relabel them 0..len-1."""
    classes = list(classes)
    remap = {c: i for i, c in enumerate(classes)}
    idx = np.flatnonzero(np.isin(ds.fine_labels, classes))
    labels = np.array([remap[c] for c in ds.fine_labels[idx]], dtype=np.int64)
    return Dataset(ds.images[idx], labels, [ds.class_names[c] for c in classes], ds.provenance,
                   None if ds.coarse_labels is None else ds.coarse_labels[idx], dict(ds.meta))


def normalize(images: np.ndarray, mean=CIFAR100_MEAN, std=CIFAR100_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - m) / s


def denormalize(images: np.ndarray, mean=CIFAR100_MEAN, std=CIFAR100_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return images * s + m


def random_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Pad-and-crop plus horizontal flip, one draw per image."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# -- synthetic clustered images -------------------------------------------------


def _domain_palette(num_domains: int) -> np.ndarray:
    hues = np.arange(num_domains) / num_domains
    return np.array([colorsys.hsv_to_rgb(h, 0.75, 0.85) for h in hues])


def _class_mask(cls: int, classes: int, res: int, rng: np.random.Generator) -> np.ndarray:
    """Shape/position pattern for class ``cls`` within a domain, with 1-px jitter."""
    yy, xx = np.mgrid[0:res, 0:res]
    angle = 2 * np.pi * cls / classes
    r = res * 0.25
    cy = res / 2 + r * np.sin(angle) + rng.integers(-1, 2)
    cx = res / 2 + r * np.cos(angle) + rng.integers(-1, 2)
    half = max(1.0, res / 8)
    kind = cls % 3
    if kind == 0:
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif kind == 1:
        mask = ((np.abs(yy - cy) <= half / 2) & (np.abs(xx - cx) <= half * 1.5)) | \
               ((np.abs(xx - cx) <= half / 2) & (np.abs(yy - cy) <= half * 1.5))
    else:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (half * 1.3) ** 2
    return mask.astype(np.float64)


def domain_probe_accuracy(images: np.ndarray, domains: np.ndarray, num_domains: int) -> float:
    """Least-squares one-vs-rest linear probe on per-image mean colour."""
    feats = images.mean(axis=(2, 3)).astype(np.float64)
    X = np.hstack([feats, np.ones((len(feats), 1))])
    Y = np.eye(num_domains)[domains]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return float(((X @ W).argmax(axis=1) == domains).mean())


PROBE_MARGIN = 0.95


def synthetic_clustered_dataset(seed: int, num_domains: int = 4, classes_per_domain: int = 3,
                                samples_per_class: int = 50, resolution: int = 16,
                                noise: float = 0.05) -> Dataset:
    """Images grouped into domains that differ in dominant hue and stripe frequency.

    Classes inside a domain share the domain's look and differ only by a
    shape drawn at a class-specific position. Labels are exactly balanced,
    and generation depends only on the arguments.
    """
    if min(num_domains, classes_per_domain, samples_per_class, resolution) < 1:
        raise ValueError("all synthetic dataset parameters must be >= 1")
    rng = np.random.default_rng(seed)
    palette = _domain_palette(num_domains)
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res] / res
    num_classes = num_domains * classes_per_domain
    n = num_classes * samples_per_class
    images = np.empty((n, 3, res, res), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    domains = labels // classes_per_domain
    for i in range(n):
        d, c = int(domains[i]), int(labels[i] % classes_per_domain)
        freq = 1.0 + 1.5 * d
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + yy * (d % 2)) + phase)
        shade = rng.uniform(0.9, 1.1)
        base = palette[d][:, None, None] * (0.75 + 0.25 * stripes)[None] * shade
        mask = _class_mask(c, classes_per_domain, res, rng)[None]
        img = base * (1 - mask) + (1.0 - palette[d])[:, None, None] * mask
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    names = [f"domain{d}_class{c}" for d in range(num_domains) for c in range(classes_per_domain)]
    acc = domain_probe_accuracy(images, domains, num_domains)
    if acc < PROBE_MARGIN:
        raise RuntimeError(f"synthetic domains not separable enough (probe accuracy {acc:.3f})")
    return Dataset(images, labels, names, "synthetic", domains,
                   {"seed": seed, "num_domains": num_domains,
                    "classes_per_domain": classes_per_domain, "domain_probe_accuracy": acc})


# -- batching -----------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
                   epoch: int = 0):
    """Yield ``(images, labels, indices)``; the last partial batch is included."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.fine_labels[idx], idx
