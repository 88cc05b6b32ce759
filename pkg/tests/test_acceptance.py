"""Acceptance checks, one test per criterion; a PASS/FAIL summary prints at the end of the run.

Criteria 8 and 10 run the full toy pipeline (two complete runs, about 35 minutes
each on one CPU core). Set ``ODGEN_ACCEPTANCE_DIR`` to keep the run directories;
re-using a directory lets up-to-date stages be skipped by the manifest check.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from odgen.conditioning import (
    ImageList,
    ImageListEncoder,
    TextList,
    TextListEncoder,
    TokenHashEmbedder,
    boxes_to_mask,
    encode_image_list,
    encode_text_list,
    image_encoder_channels,
)
from odgen.config import load_config
from odgen.core import Annotation, BBox
from odgen.diffusion import (
    ModelConfig,
    ObjectwiseDenoiser,
    control_loss,
    dual_finetune_loss,
    forward_noise,
    make_noise_schedule,
    reconstruction_loss,
)
from odgen.metrics import compute_fid, frechet_distance
from odgen.pipeline import read_pipeline_manifest, run_pipeline, stage_outputs
from odgen.shapes import make_shapes_corpus
from odgen.stats import LayoutSampler, pseudo_labels_to_dataset
from odgen.yolo import export_yolo_dataset, parse_yolo_dataset

from .helpers import (
    GRAD_TINY,
    clipping_fraction,
    perturb_zero_convs,
    random_batches,
    random_dataset,
    round_trip_corpus,
    round_trip_error,
    round_trip_violations,
)
from .oracles import central_difference_errors, count_mask, frechet_closed_form


@pytest.mark.criterion(1, "box-to-mask matches the brute-force counter on 1000 fuzzed instances in < 10 s")
def test_mask_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)
    start = time.time()
    mismatches = 0
    for _ in range(1000):
        h, w, k = int(rng.integers(1, 41)), int(rng.integers(1, 41)), int(rng.integers(1, 6))
        boxes = []
        for _ in range(int(rng.integers(0, 8))):
            bw, bh = rng.uniform(0.3, w), rng.uniform(0.3, h)
            x, y = rng.uniform(-2, w - bw + 2), rng.uniform(-2, h - bh + 2)
            if rng.random() < 0.25:
                x, bw = np.floor(x) + 0.5, float(max(1, np.floor(bw)))
            boxes.append((int(rng.integers(k)), x, y, bw, bh))
        anns = [Annotation(c, BBox(x, y, bw, bh)) for c, x, y, bw, bh in boxes]
        mismatches += not np.array_equal(boxes_to_mask(anns, h, w, k), count_mask(boxes, h, w, k))
    seconds = time.time() - start
    record_property("measured", f"{mismatches} mismatches, {seconds:.1f} s")
    assert mismatches == 0 and seconds < 10


@pytest.mark.criterion(2, "loss identities: gamma=0, all-ones mask, lambda=0")
@torch.no_grad()
def test_loss_identities(record_property):
    torch.manual_seed(0)
    model = ObjectwiseDenoiser(ModelConfig(**GRAD_TINY)).double()
    perturb_zero_convs(model)
    obj, scene, ctrl = random_batches(model, batch=3)
    rec = reconstruction_loss(model, ctrl.images, ctrl.t, ctrl.eps, ctrl.context, ctrl.control)
    gamma0_exact = torch.equal(control_loss(model, ctrl, gamma=0.0), rec)
    worst = 0.0
    for gamma in (1.0, 10.0, 25.0):
        ones = control_loss(model, ctrl, gamma, mask=torch.ones_like(ctrl.mask))
        worst = max(worst, abs(ones.item() - (1 + gamma) * rec.item()) / ((1 + gamma) * rec.item()))
    lambda0_exact = torch.equal(dual_finetune_loss(model, obj, scene, 0.0),
                                reconstruction_loss(model, obj.images, obj.t, obj.eps, obj.context))
    record_property("measured", f"gamma=0 exact {gamma0_exact}, ones-mask rel err {worst:.1e}, "
                                f"lambda=0 exact {lambda0_exact}")
    assert gamma0_exact and lambda0_exact and worst <= 1e-6


@pytest.mark.criterion(3, "analytic vs central-difference gradients, rel err <= 1e-4, < 60 s")
def test_gradient_checks(record_property):
    start = time.time()
    torch.manual_seed(0)
    model = ObjectwiseDenoiser(ModelConfig(**GRAD_TINY)).double()
    perturb_zero_convs(model, scale=0.3)
    n_params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    obj, scene, ctrl = random_batches(model)
    losses = {
        "reconstruction": lambda: reconstruction_loss(model, obj.images, obj.t, obj.eps, obj.context),
        "dual_finetune": lambda: dual_finetune_loss(model, obj, scene, 1.0),
        "control": lambda: control_loss(model, ctrl, 25.0),
    }
    worst = {name: max(central_difference_errors(fn, model.parameters(), n_coords=30, seed=i))
             for i, (name, fn) in enumerate(losses.items())}
    seconds = time.time() - start
    record_property("measured", f"{n_params} params, max rel err "
                    + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {seconds:.1f} s")
    assert n_params <= 10_000 and max(worst.values()) <= 1e-4 and seconds < 60


@pytest.mark.criterion(4, "statistics round-trip within 3 standard errors, < 30 s")
def test_statistics_round_trip(record_property):
    start = time.time()
    ds = round_trip_corpus()
    fitted = LayoutSampler(max_objects=200).fit(ds)
    clipped = clipping_fraction(fitted)
    pseudo = fitted.sample(10_000, random_state=1)
    refit = pseudo_labels_to_dataset(pseudo, ds.categories, ds.scene_name)
    bad = round_trip_violations(fitted, refit)
    seconds = time.time() - start
    record_property("measured", f"violations {bad or 'none'}, clipped {clipped:.2%}, {seconds:.1f} s")
    assert clipped < 0.01 and bad == [] and seconds < 30


@pytest.mark.criterion(5, "image-list encoder 256x8x8 with the channel presets; text-list encoder 1xLxD")
def test_conditioning_shapes(record_property):
    presets = {2: [16, 32, 96, 256], 6: [32, 96, 128, 256]}
    for n, channels in presets.items():
        enc = ImageListEncoder(n)
        convs = [m for m in enc.net if isinstance(m, torch.nn.Conv2d)]
        assert [c.out_channels for c in convs] == channels == image_encoder_channels(n)
        assert convs[0].in_channels == 3 * n
        out = encode_image_list(ImageList(np.random.default_rng(n).random((n, 64, 64, 3))), enc)
        assert tuple(out.shape) == (1, 256, 8, 8)
    emb = TokenHashEmbedder(length=8, dim=64)
    for n in (2, 6, 8, 16, 93):
        enc = TextListEncoder(n)
        convs = [m for m in enc.net if isinstance(m, torch.nn.Conv2d)]
        want = [n, n // 2, n // 4, n // 8, 1]
        # floors that reach zero are held at one channel
        assert [convs[0].in_channels] + [c.out_channels for c in convs] == [max(1, c) for c in want]
        out = encode_text_list(TextList(("a cat",) + ("",) * (n - 1)), emb, enc)
        assert tuple(out.shape) == (1, 8, 64)
    record_property("measured", "N=2,6 image lists -> (1, 256, 8, 8); N=2..93 text lists -> (1, 8, 64)")


@pytest.mark.criterion(6, "zero-init contract: conditional == unconditional within 1e-6")
@torch.no_grad()
def test_zero_init_contract(record_property):
    torch.manual_seed(0)
    model = ObjectwiseDenoiser(ModelConfig(max_objects=3))
    _, _, ctrl = random_batches(model, batch=4)
    x = torch.randn(4, 3, 64, 64)
    worst = (model(x, ctrl.t, ctrl.context, ctrl.control) - model(x, ctrl.t, ctrl.context)).abs().max().item()
    record_property("measured", f"max abs diff {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(7, "forward-process variance within 3 standard errors at t in {0, T/2, T-1}")
def test_forward_process_statistics(record_property):
    schedule = make_noise_schedule(1000)
    gen = torch.Generator().manual_seed(7)
    n, var_x0 = 10_000, 1.0 / 3.0   # x0 ~ U(-1, 1)
    z = []
    for t in (0, schedule.T // 2, schedule.T - 1):
        x0 = torch.rand(n, 1, generator=gen, dtype=torch.float64) * 2 - 1
        eps = torch.randn(n, 1, generator=gen, dtype=torch.float64)
        xt = forward_noise(x0, t, eps, schedule).view(-1).numpy()
        want = schedule.alpha_bar[t] * var_x0 + (1 - schedule.alpha_bar[t])
        c = xt - xt.mean()
        se = np.sqrt((np.mean(c ** 4) - np.mean(c ** 2) ** 2) / n)
        z.append(abs(xt.var(ddof=1) - want) / se)
    record_property("measured", "z = " + ", ".join(f"{v:.2f}" for v in z))
    assert max(z) < 3


# ---- full toy pipeline

def toy_pipeline(root: Path, name: str):
    corpus = root / "corpus"
    if not (corpus / "data.yaml").exists():
        make_shapes_corpus(corpus, n_train=200, n_val=40, n_test=40, size=64, seed=0)
    path = root / f"{name}.yaml"
    path.write_text(yaml.safe_dump({"preset": "toy", "seed": 0, "work_dir": name, "data": {"root": "corpus"}}))
    config = load_config(path)
    start = time.time()
    run_pipeline(config)
    return config, time.time() - start


@pytest.fixture(scope="module")
def acceptance_root(tmp_path_factory):
    keep = os.environ.get("ODGEN_ACCEPTANCE_DIR")
    if keep:
        Path(keep).mkdir(parents=True, exist_ok=True)
        return Path(keep)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def toy_run(acceptance_root):
    return toy_pipeline(acceptance_root, "run_a")


@pytest.mark.criterion(8, "end-to-end toy run: discriminator, realization vs baseline, filtered boxes")
def test_end_to_end_toy_run(toy_run, record_property):
    config, wall = toy_run
    manifest = read_pipeline_manifest(config)
    compute = sum(e["seconds"] for e in manifest["stages"].values())
    record = json.loads(stage_outputs(config, "eval")["report"].read_text().splitlines()[0])
    acc = record["discriminator"]["test_accuracy"]
    single = record["single_object"]
    positive = record["exported_positive_rate"]
    synth = record["synthesis"]
    record_property("measured", f"(a) test acc {acc:.3f}; (b) realization {single['conditioned']:.2f} vs "
                    f"baseline {single['baseline']:.2f} on {single['layouts']} layouts; (c) filtered positive "
                    f"{positive:.3f}; kept {synth['boxes_kept']}/{synth['boxes_total']} boxes, dropped "
                    f"{synth['dropped']}/{synth['generated']}; pool positive {record['pool_positive_rate']:.2f}; "
                    f"FID {record.get('fid', float('nan')):.2f}; {compute / 60:.1f} min")
    assert synth["generated"] == 200
    assert acc >= 0.95
    assert single["conditioned"] >= 0.70 and single["conditioned"] - single["baseline"] >= 0.2
    assert positive == 1.0
    assert compute <= 8 * 3600


@pytest.mark.criterion(9, "FID: identical sets give 0, Gaussian features match the closed form within 1e-8")
def test_fid_implementation(record_property):
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(500, 32))
    same = compute_fid(feats, feats, lambda x: x)
    worst = 0.0
    for d in (1, 4, 16, 64):
        for _ in range(3):
            mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
            a, b = rng.normal(size=(d, d)), rng.normal(size=(d, d))
            s1, s2 = a @ a.T + 0.05 * np.eye(d), b @ b.T + 0.05 * np.eye(d)
            worst = max(worst, abs(frechet_distance(mu1, s1, mu2, s2) - frechet_closed_form(mu1, s1, mu2, s2)))
    record_property("measured", f"identical {same:.1e}, max oracle diff {worst:.1e}")
    assert abs(same) <= 1e-6 and worst <= 1e-8


@pytest.mark.criterion(10, "two full same-seed pipeline runs give byte-identical YOLO label files")
def test_determinism(toy_run, acceptance_root, record_property):
    first, _ = toy_run
    second, _ = toy_pipeline(acceptance_root, "run_b")
    compared = differing = 0
    for stage, key in (("synthesize", "raw"), ("export", "dataset")):
        a = stage_outputs(first, stage)[key] / "train" / "labels"
        b = stage_outputs(second, stage)[key] / "train" / "labels"
        names = sorted(p.name for p in a.glob("*.txt"))
        assert names == sorted(p.name for p in b.glob("*.txt"))
        for name in names:
            compared += 1
            differing += (a / name).read_bytes() != (b / name).read_bytes()
    record_property("measured", f"{compared} label files compared, {differing} differ")
    assert compared > 0 and differing == 0


@pytest.mark.criterion(11, "YOLO export -> parse keeps annotations within 1e-6 on 50 fuzzed images")
def test_io_round_trip(tmp_path, record_property):
    ds = random_dataset(np.random.default_rng(11), n_images=50)
    export_yolo_dataset(ds, tmp_path)
    err = round_trip_error(ds, parse_yolo_dataset(tmp_path))
    record_property("measured", f"max normalized error {err:.1e}")
    assert err <= 1e-6
