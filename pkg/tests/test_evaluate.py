import math

import pytest
import torch
import torch.nn.functional as F

from debicl.data import synthetic_dataset
from debicl.evaluate import (
    CORRUPTION_KINDS,
    CORRUPTION_TABLES,
    CorruptionSpec,
    LandscapeProfile,
    MetricsReport,
    corrupt_dataset,
    corruption_cells,
    domain_shift_accuracy,
    evaluate_step_accuracy,
    forgetting_rate,
    loss_landscape,
    mce_from_cells,
    mean_corruption_error,
    psnr,
)
from debicl.models import build_model, parameter_checksum
from debicl.seeding import torch_gen


class SequenceOracle(torch.nn.Module):
    """Always right: emits one-hot logits for the labels in dataset order."""

    def __init__(self, labels, num_classes):
        super().__init__()
        self.labels = labels
        self.num_classes = num_classes
        self.pos = 0

    def forward(self, x):
        k = x.shape[0]
        idx = torch.arange(self.pos, self.pos + k) % len(self.labels)
        self.pos = (self.pos + k) % len(self.labels)
        return F.one_hot(self.labels[idx], self.num_classes).float()


class ConstantPredictor(torch.nn.Module):
    def __init__(self, num_classes, always=0):
        super().__init__()
        self.num_classes = num_classes
        self.always = always

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.num_classes)
        out[:, self.always] = 1.0
        return out


# ---------------------------------------------------------------------------
# accuracy / forgetting / report


def test_oracle_scores_100():
    ds = synthetic_dataset(4, 5, image_size=8, seed=0)
    assert evaluate_step_accuracy(SequenceOracle(ds.labels, 4), ds) == 100.0


def test_constant_predictor_scores_chance():
    ds = synthetic_dataset(5, 8, image_size=8, seed=1)
    acc = evaluate_step_accuracy(ConstantPredictor(5, always=2), ds)
    assert acc == pytest.approx(100.0 / 5)


def test_accuracy_matches_manual_count():
    ds = synthetic_dataset(3, 7, image_size=16, seed=2)
    model = build_model(3, widths=(8, 8, 16), seed=0).eval()
    got = evaluate_step_accuracy(model, ds)
    with torch.no_grad():
        hits = sum(
            int(model(ds.images[i : i + 1]).argmax().item() == int(ds.labels[i]))
            for i in range(len(ds))
        )
    assert got == pytest.approx(100.0 * hits / len(ds), abs=1e-6)


def test_empty_test_set_errors():
    ds = synthetic_dataset(2, 3, image_size=8, seed=0).subset([])
    with pytest.raises(ValueError):
        evaluate_step_accuracy(ConstantPredictor(2), ds)


def test_forgetting_rate():
    assert forgetting_rate(80.0, 80.0) == 0.0
    assert forgetting_rate(80.0, 70.0) == 10.0
    assert forgetting_rate(60.0, 70.0) == -10.0
    with pytest.raises(ValueError):
        forgetting_rate(101.0, 50.0)


def test_metrics_report_builder_and_invariants():
    r = MetricsReport.from_steps([80.0, 70.0, 60.0], forgetting=12.0, mce=35.0)
    assert r.avg_inc_acc == pytest.approx(70.0)
    assert r.final_acc == 60.0
    const = MetricsReport.from_steps([55.0, 55.0, 55.0], forgetting=0.0, mce=10.0)
    assert const.avg_inc_acc == 55.0
    with pytest.raises(ValueError):
        MetricsReport([80.0, 70.0], avg_inc_acc=99.0, final_acc=70.0, forgetting=0.0, mce=0.0)
    with pytest.raises(ValueError):
        MetricsReport.from_steps([80.0, 120.0], forgetting=0.0, mce=0.0)


# ---------------------------------------------------------------------------
# corruptions


def test_severity_tables_strictly_monotone():
    for kind, table in CORRUPTION_TABLES.items():
        assert len(table) == 5, kind
        diffs = [b - a for a, b in zip(table, table[1:])]
        assert all(d > 0 for d in diffs) or all(d < 0 for d in diffs), f"{kind} not strictly monotone"


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 0)
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 6)
    assert CorruptionSpec("contrast", 3).param == CORRUPTION_TABLES["contrast"][2]


def test_gaussian_noise_psnr_drops_with_severity():
    img = synthetic_dataset(1, 1, image_size=32, seed=3).images
    lo = corrupt_dataset(img, CorruptionSpec("gaussian_noise", 1), torch_gen(0, "c"))
    hi = corrupt_dataset(img, CorruptionSpec("gaussian_noise", 5), torch_gen(0, "c"))
    assert psnr(img, hi) < psnr(img, lo)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_all_kinds_shape_range_and_not_inplace(kind):
    imgs = synthetic_dataset(2, 3, image_size=16, seed=4).images
    before = imgs.clone()
    out = corrupt_dataset(imgs, CorruptionSpec(kind, 3), torch_gen(1, "c"))
    assert out.shape == imgs.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert torch.equal(imgs, before)
    assert not torch.equal(out, imgs)


def test_corruption_deterministic():
    imgs = torch.rand(3, 3, 16, 16, generator=torch_gen(5, "c"))
    spec = CorruptionSpec("shot_noise", 4)
    a = corrupt_dataset(imgs, spec, torch_gen(6, "c"))
    b = corrupt_dataset(imgs, spec, torch_gen(6, "c"))
    assert torch.equal(a, b)


def test_mce_oracle_and_constant():
    ds = synthetic_dataset(4, 6, image_size=16, seed=6)
    assert mean_corruption_error(SequenceOracle(ds.labels, 4), ds) == 0.0
    got = mean_corruption_error(ConstantPredictor(4, always=1), ds)
    assert got == pytest.approx(100.0 * 3 / 4)


def test_mce_from_hand_grid():
    cells = [
        {"kind": "a", "severity": 1, "error": 10.0},
        {"kind": "a", "severity": 2, "error": 20.0},
        {"kind": "b", "severity": 1, "error": 30.0},
        {"kind": "b", "severity": 2, "error": 40.0},
    ]
    assert mce_from_cells(cells) == 25.0


def test_mce_order_invariant():
    ds = synthetic_dataset(3, 5, image_size=16, seed=7)
    model = build_model(3, widths=(8, 8, 16), seed=1).eval()
    fwd = mean_corruption_error(model, ds, kinds=("gaussian_noise", "contrast"), severities=(1, 3))
    rev = mean_corruption_error(model, ds, kinds=("contrast", "gaussian_noise"), severities=(3, 1))
    assert abs(fwd - rev) < 1e-9


def test_cells_cover_grid():
    ds = synthetic_dataset(2, 4, image_size=16, seed=8)
    model = ConstantPredictor(2)
    rows = corruption_cells(model, ds, seed=3)
    assert len(rows) == len(CORRUPTION_KINDS) * 5
    assert {(r["kind"], r["severity"]) for r in rows} == {
        (k, s) for k in CORRUPTION_KINDS for s in range(1, 6)
    }
    with pytest.raises(ValueError):
        corruption_cells(model, ds, kinds=())


def test_domain_shift_equals_step_accuracy_on_clean():
    ds = synthetic_dataset(3, 6, image_size=16, seed=9)
    model = build_model(3, widths=(8, 8, 16), seed=2).eval()
    assert domain_shift_accuracy(model, ds) == evaluate_step_accuracy(model, ds)
    assert domain_shift_accuracy(SequenceOracle(ds.labels, 3), ds) == 100.0


# ---------------------------------------------------------------------------
# loss landscape


class QuadraticToy(torch.nn.Module):
    def __init__(self, theta0=3.0):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([[theta0]]))


def _quad_loss(model):
    return float((model.w - 1.0).pow(2).item())


def test_landscape_quadratic_closed_form():
    model = QuadraticToy(theta0=3.0)
    alphas = [-1.0, -0.5, 0.0, 0.5, 1.0]
    profile = loss_landscape(
        model, _quad_loss, alphas, num_directions=1, rng=torch_gen(0, "dir"), keep_directions=True
    )
    d = profile.directions[0]["w"].item()
    # filter normalization pins |d| to |theta0|
    assert abs(abs(d) - 3.0) < 1e-6
    for a, got in zip(alphas, profile.mean_loss):
        want = (3.0 + a * d - 1.0) ** 2
        assert abs(got - want) < 1e-9, f"alpha={a}"


def test_landscape_alpha_zero_matches_unperturbed():
    ds = synthetic_dataset(3, 6, image_size=16, seed=10)
    model = build_model(3, widths=(8, 8, 16), seed=3).eval()

    def loss_eval(m):
        with torch.no_grad():
            return float(F.cross_entropy(m(ds.images), ds.labels).item())

    base = loss_eval(model)
    profile = loss_landscape(model, loss_eval, [-0.4, 0.0, 0.4], num_directions=5, rng=torch_gen(1, "dir"))
    zero_idx = profile.alphas.index(0.0)
    for row in profile.per_direction_loss:
        assert abs(row[zero_idx] - base) <= 1e-6
    assert profile.num_directions == 5
    assert len(profile.per_direction_loss) == 5


def test_landscape_restores_parameters_bit_exactly():
    model = build_model(4, widths=(8, 8, 16), seed=4)
    before = parameter_checksum(model)
    x = torch.rand(8, 3, 16, 16, generator=torch_gen(2, "x"))

    def loss_eval(m):
        with torch.no_grad():
            return float(m(x).square().mean().item())

    loss_landscape(model, loss_eval, [0.0, 0.5, -0.5], num_directions=2, rng=torch_gen(3, "dir"))
    assert parameter_checksum(model) == before


def test_landscape_paired_directions_symmetric():
    model = build_model(3, widths=(8, 8, 16), seed=5).eval()
    x = torch.rand(6, 3, 16, 16, generator=torch_gen(4, "x"))
    y = torch.tensor([0, 1, 2, 0, 1, 2])

    def loss_eval(m):
        with torch.no_grad():
            return float(F.cross_entropy(m(x), y).item())

    alphas = [-0.6, -0.3, 0.0, 0.3, 0.6]
    profile = loss_landscape(model, loss_eval, alphas, num_directions=4, rng=torch_gen(5, "dir"), paired=True)
    for j in range(len(alphas)):
        assert profile.mean_loss[j] == profile.mean_loss[len(alphas) - 1 - j]


def test_landscape_bias_directions_are_zero():
    model = build_model(3, widths=(8, 8, 16), seed=6)
    profile = loss_landscape(
        model, lambda m: 0.0, [0.0], num_directions=1, rng=torch_gen(6, "dir"), keep_directions=True
    )
    for name, p in model.named_parameters():
        d = profile.directions[0][name]
        if p.ndim <= 1:
            assert not d.any(), name
        else:
            assert d.any(), name


def test_landscape_records_nonfinite_loss():
    model = QuadraticToy(theta0=2.0)

    def exploding(m):
        v = float((m.w - 2.0).abs().sum().item())
        return float("nan") if v > 0.5 else v

    profile = loss_landscape(model, exploding, [0.0, 1.0], num_directions=1, rng=torch_gen(7, "dir"))
    assert profile.per_direction_loss[0][0] == 0.0
    assert math.isnan(profile.per_direction_loss[0][1])


def test_landscape_validation():
    model = QuadraticToy()
    with pytest.raises(ValueError):
        loss_landscape(model, _quad_loss, [0.5, 1.0], num_directions=1)
    with pytest.raises(ValueError):
        loss_landscape(model, _quad_loss, [0.0], num_directions=3, paired=True)
    with pytest.raises(ValueError):
        LandscapeProfile(alphas=[0.0], mean_loss=[1.0, 2.0], num_directions=1, per_direction_loss=[[1.0]])
