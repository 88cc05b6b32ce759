"""Shared builders for tests."""
import math

import numpy as np
import torch

from odgen.conditioning import ConditionTriplet, ImageList, TextList
from odgen.core import Annotation, BBox, DetectionDataset, LabeledImage
from odgen.diffusion import TrainBatch
from odgen.filtering import BACKGROUND, FOREGROUND, PatchSample
from odgen.shapes import CATEGORIES, solid_shape_patch, textured_background
from odgen.stats import LayoutSampler, PseudoLabel

TINY = dict(image_size=16, channels=(4, 4, 8, 8), attn_levels=(2, 3), time_dim=8, groups=2, max_objects=2,
            text_length=4, text_dim=8, vocab_size=64, image_encoder_channels=(4, 4, 8, 8), T=50)


def make_dataset(boxes_per_image, size=(64, 64), categories=("a", "b"), scene="field"):
    """Blank images annotated with ``[(cls, x, y, w, h), ...]`` per image."""
    items = []
    h, w = size
    for i, boxes in enumerate(boxes_per_image):
        anns = tuple(Annotation(c, BBox(x, y, bw, bh)) for c, x, y, bw, bh in boxes)
        items.append(LabeledImage(np.zeros((h, w, 3), np.uint8), anns, name=f"img{i}"))
    return DetectionDataset(tuple(categories), scene, "train", tuple(items))


# under 10^4 parameters in total, for finite-difference gradient checks
GRAD_TINY = dict(image_size=8, channels=(2, 2, 4, 4), attn_levels=(3,), time_dim=4, groups=1, max_objects=2,
                 text_length=2, text_dim=4, vocab_size=16, image_encoder_channels=(2, 2, 4, 4), T=20)


def perturb_zero_convs(model, scale=0.1, seed=0):
    """Give the control branch's zero-initialized projections non-zero weights."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in list(model.control.zero_convs) + [model.control.zero_mid]:
            for p in module.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def random_batches(model, batch=2, seed=0):
    """Object, scene and control ``TrainBatch`` objects with random conditions for ``model``."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg, dtype = model.config, model.dtype
    size, n = cfg.image_size, cfg.max_objects

    def draw(prompts, control=None, mask=None):
        images = torch.rand((batch, 3, size, size), generator=gen, dtype=dtype) * 2 - 1
        t = torch.randint(0, cfg.T, (batch,), generator=gen)
        eps = torch.randn((batch, 3, size, size), generator=gen, dtype=dtype)
        return TrainBatch(images, t, eps, model.embed(prompts).detach(), control, mask)

    obj = draw((["a cat", "a dog"] * batch)[:batch])
    scene = draw(["a park"] * batch)
    triplets = [ConditionTriplet(ImageList(rng.random((n, size, size, 3))),
                                 TextList(("a cat",) + ("",) * (n - 1)), "a cat in a park") for _ in range(batch)]
    context, control = model.encode_triplets(triplets)
    mask = torch.from_numpy(rng.random((batch, size, size)) < 0.4)
    ctrl = draw(["a cat in a park"] * batch, control=control, mask=mask)
    ctrl.context = context.detach()
    return obj, scene, ctrl


def separable_patches(n=120, size=32, seed=0):
    rng = np.random.default_rng(seed)
    patches = []
    for i in range(n):
        split = "train" if i < 0.7 * n else "val" if i < 0.8 * n else "test"
        patches.append(PatchSample(solid_shape_patch(CATEGORIES[i % 3], size, rng=i), FOREGROUND, split, i))
        patches.append(PatchSample(textured_background(size, rng), BACKGROUND, split, i))
    return patches


def scene_with_one_real_object(seed=0):
    rng = np.random.default_rng(seed)
    image = textured_background(64, rng)
    image[8:40, 8:40] = solid_shape_patch("square", 32, rng=seed)
    real = Annotation(1, BBox(8, 8, 32, 32))
    ghost = Annotation(0, BBox(40, 40, 22, 22))
    return image, PseudoLabel((real, ghost), (64, 64))


def round_trip_corpus(seed=0, n_images=100):
    """Counts ~ N((14, 11), cov) and compact boxes well inside the image."""
    rng = np.random.default_rng(seed)
    cov = np.array([[9.0, 2.0], [2.0, 7.0]])
    images = []
    for _ in range(n_images):
        counts = np.clip(np.rint(rng.multivariate_normal([14, 11], cov)), 0, None).astype(int)
        boxes = []
        for cat, n in enumerate(counts):
            for _ in range(n):
                w, h = rng.uniform(6, 10), rng.uniform(6, 10)
                x, y = rng.normal(20 + 12 * cat, 3), rng.normal(24, 3)
                boxes.append((cat, x, y, w, h))
        images.append(boxes)
    return make_dataset(images, size=(64, 64))


def _se_mean(x):
    return x.std(ddof=1) / math.sqrt(len(x))


def _se_var(x):
    c = x - x.mean()
    return math.sqrt(max(np.mean(c**4) - np.mean(c**2) ** 2, 1e-30) / len(x))


def round_trip_violations(fitted: LayoutSampler, refit_ds) -> list[str]:
    """Compare fitted parameters with the sample statistics of ``refit_ds``."""
    bad = []
    counts = refit_ds.count_matrix().astype(float)
    cs = fitted.count_stats_
    k = counts.shape[1]
    for i in range(k):
        if abs(counts[:, i].mean() - cs.mu[i]) > 3 * _se_mean(counts[:, i]):
            bad.append(f"count mu[{i}]")
        for j in range(k):
            prod = (counts[:, i] - counts[:, i].mean()) * (counts[:, j] - counts[:, j].mean())
            est = prod.sum() / (len(prod) - 1)
            if abs(est - cs.sigma[i, j]) > 3 * (prod.std(ddof=1) / math.sqrt(len(prod))):
                bad.append(f"count sigma[{i},{j}]")
    feats = {c: [] for c in range(k)}
    for item in refit_ds.items:
        h, w = item.size
        for a in item.annotations:
            b = a.bbox
            feats[a.category_id].append((b.x / w, b.y / h, b.w * b.h / (w * h), (b.w / w) / (b.h / h)))
    names = ("x", "y", "area", "ratio")
    for c, rows in feats.items():
        arr = np.array(rows)
        s = fitted.box_stats_[c]
        for j, name in enumerate(names):
            col = arr[:, j]
            if abs(col.mean() - s.means[j]) > 3 * _se_mean(col):
                bad.append(f"class {c} mu_{name}")
            if abs(col.var(ddof=1) - s.stds[j] ** 2) > 3 * _se_var(col):
                bad.append(f"class {c} var_{name}")
    return bad


def clipping_fraction(fitted: LayoutSampler, n=4000, seed=99) -> float:
    """Fraction of raw box draws that clipping or rejection would alter."""
    rng = np.random.default_rng(seed)
    total = altered = 0
    for c in range(len(fitted.categories_)):
        s = fitted.box_stats_[c]
        d = rng.normal(s.means, s.stds, size=(n, 4))
        x, y, area, ratio = d.T
        ok = (area > 0) & (ratio > 0)
        wn = np.sqrt(np.where(ok, area * ratio, 0))
        hn = np.sqrt(np.where(ok, area / np.where(ok, ratio, 1), 0))
        inside = ok & (x >= 0) & (y >= 0) & (x + wn <= 1) & (y + hn <= 1)
        total += n
        altered += int((~inside).sum())
    return altered / total


def random_dataset(rng, n_images=50, k=4):
    """Random sizes, pixels and 0-5 boxes per image."""
    items = []
    for i in range(n_images):
        h, w = int(rng.integers(16, 97)), int(rng.integers(16, 97))
        anns = []
        for _ in range(int(rng.integers(0, 6))):
            bw, bh = rng.uniform(2, w), rng.uniform(2, h)
            x, y = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            anns.append(Annotation(int(rng.integers(k)), BBox(x, y, bw, bh)))
        px = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        items.append(LabeledImage(px, tuple(anns), name=f"im{i:03d}"))
    return DetectionDataset(tuple(f"c{j}" for j in range(k)), "scene", "train", tuple(items))


def round_trip_error(ds, back) -> float:
    """Largest normalized-coordinate difference; asserts everything else matches exactly."""
    assert back.categories == ds.categories and back.scene_name == ds.scene_name
    assert len(back) == len(ds)
    by_name = {it.name: it for it in back.items}
    worst = 0.0
    for item in ds.items:
        got = by_name[item.name]
        np.testing.assert_array_equal(got.pixels, item.pixels)
        h, w = item.size
        assert len(got.annotations) == len(item.annotations)
        for a, b in zip(item.annotations, got.annotations):
            assert a.category_id == b.category_id
            na = np.array([a.bbox.x / w, a.bbox.y / h, a.bbox.w / w, a.bbox.h / h])
            nb = np.array([b.bbox.x / w, b.bbox.y / h, b.bbox.w / w, b.bbox.h / h])
            worst = max(worst, float(np.max(np.abs(na - nb))))
    return worst
