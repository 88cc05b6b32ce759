import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from odgen.conditioning import ForegroundPool, empty_triplet
from odgen.diffusion import (
    ModelConfig,
    ObjectwiseDenoiser,
    OptimizerConfig,
    control_loss,
    dual_finetune_loss,
    forward_noise,
    generate_foreground_pool,
    load_checkpoint,
    make_noise_schedule,
    reconstruction_loss,
    sample_image,
    sample_triplets,
    sampling_timesteps,
    save_checkpoint,
    squared_error,
    train_control,
    train_finetune,
)
from odgen.exceptions import BadSchedule, Divergence, PoolMiss, ShapeMismatch
from odgen.imaging import resize_dataset
from odgen.shapes import CATEGORIES, solid_shape_patch

from .helpers import GRAD_TINY, perturb_zero_convs, random_batches
from .oracles import central_difference_errors, cosine_alpha_bar_direct


def params_of(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def assert_same_params(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def shapes_pool(size=16, per_class=2):
    pool = ForegroundPool(CATEGORIES)
    for c in CATEGORIES:
        for i in range(per_class):
            pool.add(c, solid_shape_patch(c, size, rng=i))
    return pool


# ---- schedule and forward process

def test_linear_schedule():
    s = make_noise_schedule(1000)
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(2e-2)
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[0] == pytest.approx(0.9999)


def test_two_step_schedule():
    s = make_noise_schedule(2)
    b0, b1 = s.beta
    np.testing.assert_allclose(s.alpha_bar, [1 - b0, (1 - b0) * (1 - b1)], rtol=0, atol=0)


@pytest.mark.parametrize("T", [0, 1, -5, 2.5])
def test_bad_schedule(T):
    with pytest.raises(BadSchedule):
        make_noise_schedule(T)
    with pytest.raises(BadSchedule):
        make_noise_schedule(10, "sigmoid")


@pytest.mark.parametrize("T", [10, 1000])
def test_cosine_schedule_matches_direct_formula(T):
    s = make_noise_schedule(T, "cosine")
    want = np.array([cosine_alpha_bar_direct(t + 1, T) for t in range(T - 1)])
    np.testing.assert_allclose(s.alpha_bar[:-1], want, rtol=0, atol=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_forward_noise_endpoints():
    x0, eps = torch.randn(2, 3, 4, 4, dtype=torch.float64), torch.randn(2, 3, 4, 4, dtype=torch.float64)
    near_one = make_noise_schedule(10, beta_start=1e-12, beta_end=1e-12)
    torch.testing.assert_close(forward_noise(x0, 0, eps, near_one), x0, atol=1e-5, rtol=0)
    near_zero = make_noise_schedule(10, beta_start=0.999, beta_end=0.999)
    torch.testing.assert_close(forward_noise(x0, 9, eps, near_zero), eps, atol=1e-12, rtol=0)


def test_forward_noise_validates():
    s = make_noise_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(1, 3, 2, 2), 10, torch.zeros(1, 3, 2, 2), s)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(1, 3, 2, 2), 0, torch.zeros(1, 3, 2, 3), s)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_noise_is_affine_with_unit_square_coefficients(t, a, b):
    s = make_noise_schedule(1000)
    x0, eps = torch.randn(1, 3, 2, 2, dtype=torch.float64), torch.randn(1, 3, 2, 2, dtype=torch.float64)
    c0 = forward_noise(torch.ones_like(x0), t, torch.zeros_like(x0), s)[0, 0, 0, 0]
    ce = forward_noise(torch.zeros_like(x0), t, torch.ones_like(x0), s)[0, 0, 0, 0]
    assert float(c0 ** 2 + ce ** 2) == pytest.approx(1.0, abs=1e-12)
    torch.testing.assert_close(forward_noise(a * x0, t, b * eps, s), a * c0 * x0 + b * ce * eps)


def test_forward_noise_variance_monte_carlo():
    s = make_noise_schedule(1000)
    gen = torch.Generator().manual_seed(0)
    n = 10_000
    x0 = torch.randn(n, generator=gen, dtype=torch.float64) * 0.5
    for t in (0, 500, 999):
        eps = torch.randn(n, generator=gen, dtype=torch.float64)
        xt = forward_noise(x0.view(n, 1), t, eps.view(n, 1), s).view(-1).numpy()
        var_x0 = float(x0.var())
        want = s.alpha_bar[t] * var_x0 + (1 - s.alpha_bar[t])
        # the x0 sample is shared, so only the noise term is random given var_x0
        se = want * np.sqrt(2 / (n - 1))
        assert abs(xt.var(ddof=1) - want) < 3 * se


# ---- losses

class Oracle(torch.nn.Module):
    """Predicts a fixed tensor regardless of input."""

    def __init__(self, out, schedule):
        super().__init__()
        self.out, self.schedule = out, schedule

    def forward(self, x, t, context, control=None):
        return self.out


def test_reconstruction_loss_examples():
    s = make_noise_schedule(10)
    x0, eps = torch.randn(4, 3, 8, 8), torch.randn(4, 3, 8, 8)
    t = torch.zeros(4, dtype=torch.long)
    assert float(reconstruction_loss(Oracle(eps, s), x0, t, eps, None)) == 0.0
    assert float(reconstruction_loss(Oracle(torch.zeros_like(eps), s), x0, t, eps, None)) == pytest.approx(
        float((eps ** 2).mean()))


@torch.no_grad()
def test_loss_identities(tiny_model):
    perturb_zero_convs(tiny_model)
    obj, scene, ctrl = random_batches(tiny_model)
    rec = reconstruction_loss(tiny_model, ctrl.images, ctrl.t, ctrl.eps, ctrl.context, ctrl.control)
    assert torch.equal(control_loss(tiny_model, ctrl, gamma=0.0), rec)
    ones = torch.ones_like(ctrl.mask)
    for gamma in (1.0, 25.0):
        got = control_loss(tiny_model, ctrl, gamma, mask=ones).item()
        assert got == pytest.approx((1 + gamma) * rec.item(), rel=1e-6)
        assert torch.equal(control_loss(tiny_model, ctrl, gamma, mask=torch.zeros_like(ctrl.mask)), rec)
    obj_only = reconstruction_loss(tiny_model, obj.images, obj.t, obj.eps, obj.context)
    assert torch.equal(dual_finetune_loss(tiny_model, obj, scene, 0.0), obj_only)
    scene_only = reconstruction_loss(tiny_model, scene.images, scene.t, scene.eps, scene.context)
    assert float(dual_finetune_loss(tiny_model, obj, scene, 1.0)) == pytest.approx(float(obj_only + scene_only))
    l1, l2 = (float(dual_finetune_loss(tiny_model, obj, scene, lam)) for lam in (0.3, 1.7))
    l12, l0 = float(dual_finetune_loss(tiny_model, obj, scene, 2.0)), float(obj_only)
    assert l1 + l2 == pytest.approx(l12 + l0, rel=1e-6)


def test_control_loss_mask_shape_mismatch(tiny_model):
    _, _, ctrl = random_batches(tiny_model)
    with pytest.raises(ShapeMismatch):
        control_loss(tiny_model, ctrl, 25.0, mask=torch.ones(2, 8, 8))
    ctrl.mask = None
    with pytest.raises(ValueError):
        control_loss(tiny_model, ctrl, 25.0)


def test_masked_term_averages_over_all_elements(tiny_model):
    _, _, ctrl = random_batches(tiny_model)
    err = squared_error(tiny_model, ctrl.images, ctrl.t, ctrl.eps, ctrl.context, ctrl.control)
    m = ctrl.mask[:, None].double()
    want = err.mean() + 25 * (err * m).sum() / err.numel()
    torch.testing.assert_close(control_loss(tiny_model, ctrl, 25.0).double(), want)


class TwoLayer(torch.nn.Module):
    def __init__(self, schedule):
        super().__init__()
        self.schedule = schedule
        self.a = torch.nn.Conv2d(3, 4, 3, padding=1).double()
        self.b = torch.nn.Conv2d(4, 3, 3, padding=1).double()

    def forward(self, x, t, context, control=None):
        return self.b(torch.tanh(self.a(x) + t.view(-1, 1, 1, 1) / 10))


def test_gradient_two_layer_model():
    torch.manual_seed(0)
    model = TwoLayer(make_noise_schedule(10))
    x0, eps = torch.randn(3, 3, 5, 5, dtype=torch.float64), torch.randn(3, 3, 5, 5, dtype=torch.float64)
    t = torch.tensor([0, 4, 9])
    errs = central_difference_errors(lambda: reconstruction_loss(model, x0, t, eps, None), model.parameters())
    assert max(errs) <= 1e-4


@pytest.fixture
def grad_model():
    torch.manual_seed(0)
    model = ObjectwiseDenoiser(ModelConfig(**GRAD_TINY)).double()
    perturb_zero_convs(model, scale=0.3)
    assert sum(p.numel() for p in model.parameters() if p.requires_grad) <= 10_000
    return model


def test_gradient_all_losses(grad_model):
    obj, scene, ctrl = random_batches(grad_model)
    losses = {
        "reconstruction": lambda: reconstruction_loss(grad_model, obj.images, obj.t, obj.eps, obj.context),
        "dual": lambda: dual_finetune_loss(grad_model, obj, scene, 1.0),
        "control": lambda: control_loss(grad_model, ctrl, 25.0),
    }
    for name, fn in losses.items():
        errs = central_difference_errors(fn, grad_model.parameters(), n_coords=12)
        assert len(errs) == 13 and max(errs) <= 1e-4, (name, errs)


# ---- model contracts

def test_zero_init_conditional_equals_unconditional(tiny_model):
    _, _, ctrl = random_batches(tiny_model)
    x = torch.randn(2, 3, 16, 16)
    cond = tiny_model(x, ctrl.t, ctrl.context, ctrl.control)
    uncond = tiny_model(x, ctrl.t, ctrl.context)
    torch.testing.assert_close(cond, uncond, atol=1e-6, rtol=0)


def test_perturbed_control_changes_output(tiny_model):
    perturb_zero_convs(tiny_model)
    _, _, ctrl = random_batches(tiny_model)
    x = torch.randn(2, 3, 16, 16)
    assert not torch.allclose(tiny_model(x, ctrl.t, ctrl.context, ctrl.control), tiny_model(x, ctrl.t, ctrl.context))


def test_control_branch_copies_base_encoder(tiny_model):
    with torch.no_grad():
        next(tiny_model.unet.encoder.parameters()).add_(1.0)
    tiny_model.reset_control_from_base()
    for a, b in zip(tiny_model.unet.encoder.parameters(), tiny_model.control.encoder.parameters()):
        assert torch.equal(a, b)


def test_empty_conditions_sample_like_base_model(tiny_model):
    tr = [empty_triplet(2, 16, 16, "park")] * 2
    a = sample_triplets(tiny_model, tr, steps=5, rng=0)
    b = sample_triplets(tiny_model, tr, steps=5, rng=0, use_control=False)
    assert np.abs(a.astype(int) - b.astype(int)).max() <= 1


# ---- sampling

def test_sampling_timesteps():
    assert sampling_timesteps(10, 10).tolist() == list(range(9, -1, -1))
    ts = sampling_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 0 and np.all(np.diff(ts) < 0)
    with pytest.raises(ValueError):
        sampling_timesteps(10, 0)


def test_sample_image_deterministic_and_in_range(tiny_model):
    tr = empty_triplet(2, 16, 16, "park")
    a = sample_image(tiny_model, tr, steps=4, rng=3)
    b = sample_image(tiny_model, tr, steps=4, rng=3)
    assert a.dtype == np.uint8 and a.shape == (16, 16, 3)
    np.testing.assert_array_equal(a, b)
    full = sample_image(tiny_model, tr, steps=tiny_model.schedule.T, rng=3)
    assert full.shape == (16, 16, 3)


def test_sampling_independent_of_batch_size(tiny_model):
    tr = [empty_triplet(2, 16, 16, s) for s in ("park", "road", "sea")]
    a = sample_triplets(tiny_model, tr, steps=3, rng=1, batch_size=3)
    b = sample_triplets(tiny_model, tr, steps=3, rng=1, batch_size=1)
    assert np.abs(a.astype(int) - b.astype(int)).max() <= 1


def test_generate_foreground_pool_counts(tiny_model, tmp_path):
    pool = generate_foreground_pool(tiny_model, ("cat", "dog", "fish"), size=4, rng=0, steps=2)
    assert {c: len(v) for c, v in pool.images.items()} == {"cat": 4, "dog": 4, "fish": 4}
    pool.save(tmp_path)
    assert len(list(tmp_path.rglob("*.png"))) == 12


# ---- checkpoints and training

def test_checkpoint_round_trip(tiny_model, tmp_path):
    perturb_zero_convs(tiny_model)
    path = save_checkpoint(tiny_model, tmp_path / "m.pt", {"step": 3})
    back = load_checkpoint(path)
    assert back.config == tiny_model.config
    assert_same_params(params_of(back), params_of(tiny_model))
    blob = torch.load(path, weights_only=False)
    blob["config_hash"] = "0" * 64
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")


def test_finetune_zero_steps_is_bitwise_noop(tiny_model, shapes_small):
    before = params_of(tiny_model)
    train_finetune(tiny_model, shapes_small, steps=0, rng=0)
    assert_same_params(before, params_of(tiny_model))


def test_finetune_lowers_probe_loss_and_is_deterministic(tiny_config, shapes_small, tmp_path):
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = ObjectwiseDenoiser(tiny_config)
        history = []
        train_finetune(model, shapes_small, steps=40, optimizer_config=OptimizerConfig(lr=3e-3, batch_size=8),
                       rng=5, history=history, metrics_path=tmp_path / "m.jsonl")
        runs.append(params_of(model))
    probes = [r["probe_loss"] for r in history if "probe_loss" in r]
    assert probes[-1] < probes[0]
    assert_same_params(*runs)
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 2 * len(history)


def test_finetune_divergence_calls_hook(tiny_model, shapes_small, tmp_path):
    with torch.no_grad():
        tiny_model.unet.conv_out.bias.fill_(float("nan"))
    seen = []
    with pytest.raises(Divergence):
        train_finetune(tiny_model, shapes_small, steps=3, rng=0, checkpoint_path=tmp_path / "d.pt",
                       on_divergence=lambda m, p: seen.append(p))
    assert seen == [tmp_path / "d.pt"]


def test_train_control_updates_branch_and_respects_freeze(tiny_config, shapes_small):
    data = resize_dataset(shapes_small, 16)
    cfg = OptimizerConfig(lr=1e-3, batch_size=4)
    for freeze in (False, True):
        torch.manual_seed(0)
        model = ObjectwiseDenoiser(tiny_config)
        before = params_of(model)
        train_control(model, data, shapes_pool(), gamma=25, steps=3, optimizer_config=cfg, rng=0, freeze_base=freeze)
        after = params_of(model)
        changed = {k for k in before if not torch.equal(before[k], after[k])}
        assert any(k.startswith("control.zero_convs") for k in changed)
        assert any(k.startswith("unet.") for k in changed) is not freeze
        assert all(p.requires_grad for p in model.unet.parameters())


def test_train_control_zero_steps_and_pool_miss(tiny_model, shapes_small):
    data = resize_dataset(shapes_small, 16)
    before = params_of(tiny_model)
    train_control(tiny_model, data, shapes_pool(), steps=0, rng=0)
    assert_same_params(before, params_of(tiny_model))
    partial = ForegroundPool(CATEGORIES, {"circle": [solid_shape_patch("circle", 16)], "square": [], "triangle": []})
    with pytest.raises(PoolMiss):
        train_control(tiny_model, data, partial, steps=1, rng=0)
