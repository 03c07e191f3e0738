import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import ppap_training
from ppap_errors import ConfigurationError, ValidationError
from ppap_model import ModelConfig, ModelInputs
from ppap_training import (
    AblationReport,
    RunResult,
    SweepCurve,
    TrainingConfig,
    _batch_slices,
    aggregate_runs,
    draw_gains,
    evaluate,
    kruskal_wallis_bonferroni,
    participant_sweep,
    participant_sweep_all,
    plot_sweep,
    read_runs_csv,
    run_ablation,
    train,
    write_runs_csv,
)
from soundscape_dataset import generate_synthetic_dataset
from soundscape_features import GainStats

QUICK = TrainingConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=2)


def _split(samples, fold):
    return [s for s in samples if s.fold != fold], [s for s in samples if s.fold == fold]


# ---- 基础 ----
@pytest.mark.parametrize(
    "n, batch_size, expected",
    [
        (64, 32, [(0, 32), (32, 64)]),
        (33, 32, [(0, 33)]),
        (10, 4, [(0, 4), (4, 8), (8, 10)]),
        (1, 4, [(0, 1)]),
    ],
)
def test_batch_slices(n, batch_size, expected):
    assert [(s.start, s.stop) for s in _batch_slices(n, batch_size)] == expected


def test_training_config_validation():
    with pytest.raises(ConfigurationError):
        TrainingConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        TrainingConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    assert TrainingConfig.from_dict(QUICK.to_dict()) == QUICK


# ---- Kruskal-Wallis ----
def test_kruskal_wallis_reference_value():
    result = kruskal_wallis_bonferroni([[1, 2, 3], [4, 5, 6]], num_comparisons=1)
    assert result.h_statistic == pytest.approx(3.857, abs=1e-3)
    assert result.p_value == pytest.approx(0.0495, abs=1e-3)
    assert result.p_adjusted == result.p_value


def test_bonferroni_multiplies_and_clamps():
    raw = kruskal_wallis_bonferroni([[1, 2, 3], [4, 5, 6]], num_comparisons=1).p_value
    corrected = kruskal_wallis_bonferroni([[1, 2, 3], [4, 5, 6]], 9)
    assert corrected.p_value == raw
    assert corrected.p_adjusted == pytest.approx(9 * raw, rel=1e-12)
    assert corrected.p_adjusted == pytest.approx(0.4458, abs=1e-3)
    assert not corrected.significant()

    # H = 3/7，原始 p ≈ 0.513 > 1/9
    clamped = kruskal_wallis_bonferroni([[1, 3, 5], [2, 4, 6]], 9)
    assert clamped.h_statistic == pytest.approx(3 / 7, abs=1e-12)
    assert clamped.p_value > 1 / 9
    assert clamped.p_adjusted == 1.0
    many = kruskal_wallis_bonferroni([list(range(20)), list(range(30, 50))], 9)
    assert many.p_adjusted == pytest.approx(min(1.0, many.p_value * 9))
    assert many.significant()


def test_kruskal_wallis_identical_values():
    result = kruskal_wallis_bonferroni([[0.1, 0.1], [0.1, 0.1, 0.1]], 9)
    assert (result.h_statistic, result.p_value, result.p_adjusted) == (0.0, 1.0, 1.0)


def test_kruskal_wallis_is_rank_based(rng):
    a, b = rng.normal(size=7), rng.normal(loc=0.5, size=6)
    plain = kruskal_wallis_bonferroni([a, b], 1)
    transformed = kruskal_wallis_bonferroni([np.exp(a), np.exp(b)], 1)
    assert transformed.h_statistic == pytest.approx(plain.h_statistic)


@pytest.mark.parametrize("groups, k", [([[1.0, 2.0]], 1), ([[1.0], []], 1), ([[1.0], [2.0]], 0)])
def test_kruskal_wallis_input_errors(groups, k):
    with pytest.raises(ValidationError):
        kruskal_wallis_bonferroni(groups, k)


# ---- 汇总 ----
def _runs(config, values, failed=0):
    runs = [RunResult(config=config, fold=i % 5, seed=i, mse=v, epochs_run=3) for i, v in enumerate(values)]
    runs += [RunResult(config=config, fold=0, seed=100 + i, mse=math.nan, epochs_run=0, status="failed",
                       error="TrainingDivergedError: boom") for i in range(failed)]
    return runs


def test_aggregate_matches_brute_force(rng):
    base = rng.uniform(0.10, 0.14, size=10)
    variant = rng.uniform(0.09, 0.13, size=10)
    runs = _runs("baseline", base) + _runs("ip-ev-lf", variant, failed=2)
    report = aggregate_runs(runs, num_comparisons=9)
    row = report.row("ip-ev-lf")
    assert row.n_runs == 10 and row.n_failed == 2
    assert row.mean_mse == pytest.approx(variant.mean())
    assert row.std_mse == pytest.approx(variant.std(ddof=1))
    assert row.pct_delta == pytest.approx(100 * (base.mean() - variant.mean()) / base.mean())
    expected = kruskal_wallis_bonferroni([variant, base], 9)
    assert row.p_adjusted == pytest.approx(expected.p_adjusted)
    baseline = report.row("baseline")
    assert baseline.pct_delta == 0.0
    assert math.isnan(baseline.p_value)
    assert (row.fusion, row.participant, row.visual) == ("LF", "IP", "EV")


def test_percent_delta_example():
    report = aggregate_runs(_runs("baseline", [0.1217, 0.1217]) + _runs("ip-ev-lf", [0.1183, 0.1183]))
    assert round(report.row("ip-ev-lf").pct_delta, 1) == 2.8


def test_aggregate_ignores_run_order(rng):
    runs = _runs("baseline", rng.uniform(size=6)) + _runs("ep-iv-mf", rng.uniform(size=6))
    shuffled = [runs[i] for i in rng.permutation(len(runs))]
    assert aggregate_runs(runs).to_frame().equals(aggregate_runs(shuffled).to_frame())


def test_report_and_runs_csv_round_trip(tmp_path, rng):
    runs = _runs("baseline", rng.uniform(size=4)) + _runs("ip-iv-ef", rng.uniform(size=4), failed=1)
    runs[0].curve = [(1, 0.5, 0.6), (2, 0.25, 0.4)]
    loaded = read_runs_csv(write_runs_csv(runs, tmp_path / "runs.csv"))
    assert len(loaded) == len(runs)
    by_key = {(r.config, r.seed): r for r in loaded}
    assert by_key[("baseline", 0)].curve == [(1, 0.5, 0.6), (2, 0.25, 0.4)]
    failed = [r for r in loaded if not r.ok]
    assert len(failed) == 1 and math.isnan(failed[0].mse)
    assert failed[0].error.startswith("TrainingDivergedError")

    report = aggregate_runs(loaded, num_comparisons=9)
    again = AblationReport.read_csv(report.write_csv(tmp_path / "ablation.csv"))
    assert [r.config for r in again.rows] == ["baseline", "ip-iv-ef"]
    assert again.row("ip-iv-ef").mean_mse == pytest.approx(report.row("ip-iv-ef").mean_mse)


# ---- 训练 ----
def test_training_is_deterministic(synthetic_samples, mini_config):
    train_s, val_s = _split(synthetic_samples, 0)
    cfg = mini_config.with_label("ip-ev-lf")
    first, model_a = train(cfg, train_s, val_s, seed=3, training=QUICK)
    second, model_b = train(cfg, train_s, val_s, seed=3, training=QUICK)
    assert first.curve == second.curve
    assert first.mse == second.mse
    for key, value in model_a.state_dict().items():
        assert_array_equal(value, model_b.state_dict()[key])
    other, _ = train(cfg, train_s, val_s, seed=4, training=QUICK)
    assert other.curve != first.curve


def test_training_records_run_metadata(synthetic_samples, mini_config, tmp_path):
    train_s, val_s = _split(synthetic_samples, 1)
    path = tmp_path / "run.ckpt"
    result, model = train(mini_config.with_label("ip-iv-mf"), train_s, val_s, seed=0, training=QUICK,
                          fold=1, checkpoint_path=path, metadata={"participant_names": ["a", "b", "c", "d", "e"]})
    assert result.ok and result.epochs_run == 2
    assert 1 <= result.best_epoch <= result.epochs_run
    assert [e for e, _, _ in result.curve] == [1, 2]
    assert model.metadata["fold"] == 1
    assert_allclose(model.metadata["participant_mean"], np.mean([s.participant for s in train_s], axis=0))
    assert path.exists()


def test_training_needs_data(synthetic_samples, mini_config):
    with pytest.raises(ConfigurationError):
        train(mini_config, synthetic_samples[:1], synthetic_samples[1:3], seed=0, training=QUICK)
    with pytest.raises(ConfigurationError):
        train(mini_config, synthetic_samples[:4], [], seed=0, training=QUICK)


def test_late_fusion_evaluation_uses_adapter_output(synthetic_samples, mini_config, tmp_path):
    train_s, val_s = _split(synthetic_samples, 2)
    _, model = train(mini_config.with_label("ip-ev-lf"), train_s, val_s, seed=1, training=QUICK,
                     checkpoint_path=tmp_path / "lf.ckpt")
    result = evaluate(model, val_s, seed=5)
    frame = result.predictions
    assert len(frame) == len(val_s)
    assert_allclose(result.mse, np.mean((frame["label"] - frame["mu_tilde"]) ** 2))
    assert not np.allclose(frame["mu_tilde"], frame["mu"])
    reloaded = evaluate(tmp_path / "lf.ckpt", val_s, seed=5)
    assert reloaded.mse == result.mse
    assert reloaded.predictions.equals(frame)


# ---- 消融 ----
def test_reduced_ablation_grid(synthetic_samples, mini_config, tmp_path):
    report = run_ablation(synthetic_samples, seeds=[1, 2], configs=["baseline", "ip-ev-lf"], folds=[0, 1],
                          model_config=mini_config, training=TrainingConfig(batch_size=8, max_epochs=1),
                          workers=2, checkpoint_dir=tmp_path)
    assert [r.config for r in report.rows] == ["baseline", "ip-ev-lf"]
    assert len(report.runs) == 8
    assert all(r.ok for r in report.runs)
    assert report.num_comparisons == 1
    assert (tmp_path / "ip-ev-lf_fold1_seed2.ckpt").exists()
    serial = run_ablation(synthetic_samples, seeds=[1, 2], configs=["baseline", "ip-ev-lf"], folds=[0, 1],
                          model_config=mini_config, training=TrainingConfig(batch_size=8, max_epochs=1),
                          workers=1)
    assert serial.to_frame().equals(report.to_frame())


def test_failed_run_does_not_abort_ablation(synthetic_samples, mini_config, monkeypatch):
    real_train = ppap_training.train

    def flaky_train(model_config, train_samples, val_samples, seed, **kwargs):
        if seed == 2 and model_config.label == "ep-iv-ef":
            raise RuntimeError("simulated failure")
        return real_train(model_config, train_samples, val_samples, seed, **kwargs)

    monkeypatch.setattr(ppap_training, "train", flaky_train)
    report = run_ablation(synthetic_samples, seeds=[1, 2], configs=["baseline", "ep-iv-ef"], folds=[0],
                          model_config=mini_config, training=TrainingConfig(batch_size=8, max_epochs=1),
                          workers=1)
    row = report.row("ep-iv-ef")
    assert (row.n_runs, row.n_failed) == (1, 1)
    failed = [r for r in report.runs if not r.ok]
    assert failed[0].error == "RuntimeError: simulated failure"


def test_ablation_rejects_bad_grid(synthetic_samples, mini_config):
    with pytest.raises(ConfigurationError):
        run_ablation(synthetic_samples, seeds=[1], configs=["ip-ev-xx"], model_config=mini_config)
    with pytest.raises(ConfigurationError):
        run_ablation(synthetic_samples, seeds=[], configs=["baseline"], model_config=mini_config)


# ---- 扫描 ----
def test_sweep_requires_participant_embeddings(synthetic_samples, mini_config):
    train_s, val_s = _split(synthetic_samples, 0)
    _, model = train(mini_config, train_s, val_s, seed=0, training=QUICK)
    with pytest.raises(ConfigurationError):
        participant_sweep(model, val_s, dim=0, grid=[0.0, 1.0])


def test_single_point_sweep_matches_manual_prediction(synthetic_samples, mini_config, tmp_path):
    train_s, val_s = _split(synthetic_samples, 0)
    _, model = train(mini_config.with_label("ip-ev-mf"), train_s, val_s, seed=0, training=QUICK)
    curve = participant_sweep(model, val_s, dim=2, grid=[0.25])
    assert curve.grid.tolist() == [0.25]
    participant = np.tile(model.metadata["participant_mean"], (len(val_s), 1))
    participant[:, 2] = 0.25
    gammas = draw_gains(val_s, GainStats(**model.metadata["gain_stats"]), np.random.default_rng(0))
    expected = model(ModelInputs.from_samples(val_s, gammas, participant=participant)).mu.data.mean()
    assert curve.mean_prediction[0] == pytest.approx(expected, abs=1e-12)
    assert curve.training_mean == pytest.approx(model.metadata["participant_mean"][2])

    loaded = SweepCurve.read_csv(curve.write_csv(tmp_path / "sweep_2.csv"))
    assert loaded.name == "piq_3"
    assert_allclose(loaded.mean_prediction, curve.mean_prediction)
    svg = plot_sweep(curve, tmp_path / "sweep_2.svg")
    assert "<svg" in svg.read_text()


def test_sweep_validates_dim_and_grid(synthetic_samples, mini_config):
    train_s, val_s = _split(synthetic_samples, 0)
    _, model = train(mini_config.with_label("ip-ev-ef"), train_s, val_s, seed=0, training=QUICK)
    with pytest.raises(ConfigurationError):
        participant_sweep(model, val_s, dim=5, grid=[0.5])
    with pytest.raises(ConfigurationError):
        participant_sweep(model, val_s, dim=0, grid=[1.5])
    curves = participant_sweep_all(model, val_s, grid=np.linspace(0, 1, 3))
    assert [c.dim for c in curves] == [0, 1, 2, 3, 4]


# ---- 长时间训练 ----
# 整批训练：batch norm 的训练统计量就是整个训练集的统计量，running 统计量紧跟其后
FULL_BATCH = TrainingConfig(lr=1e-2, batch_size=50, max_epochs=100, patience=100)


@pytest.mark.slow
def test_capacity_on_planted_data():
    cfg = ModelConfig.miniature(dropout_rate=0.0, bn_momentum=0.5).with_label("ip-iv-ef")
    samples = generate_synthetic_dataset(50, seed=21, config=cfg, silent_rate=0.0).samples()
    result, model = train(cfg, samples, samples, seed=0, training=FULL_BATCH)
    train_j = [t for _, t, _ in result.curve]
    assert all(later < earlier for earlier, later in zip(train_j[:4], train_j[1:5]))
    assert result.mse < 0.01
    assert evaluate(model, samples).mse == pytest.approx(result.mse, abs=1e-12)

    again, _ = train(cfg, samples, samples, seed=0, training=FULL_BATCH)
    assert again.curve == result.curve


@pytest.mark.slow
def test_participant_signal_is_detected_and_monotone():
    cfg = ModelConfig.miniature(dropout_rate=0.0, bn_momentum=0.9)
    samples = generate_synthetic_dataset(500, seed=0, config=cfg).samples()
    training = TrainingConfig(lr=3e-3, batch_size=32, max_epochs=30, patience=5)
    report = run_ablation(samples, seeds=[0, 1, 2], configs=["baseline", "ip-ev-mf"], folds=[0, 1],
                          model_config=cfg, training=training)
    row = report.row("ip-ev-mf")
    assert row.mean_mse < report.row("baseline").mean_mse
    assert row.h_statistic > 0

    train_s, val_s = _split(samples, 0)
    _, model = train(cfg.with_label("ip-ev-mf"), train_s, val_s, seed=0, training=training)
    curve = participant_sweep(model, val_s, dim=0, grid=np.linspace(0, 1, 11))
    assert np.all(np.diff(curve.mean_prediction) >= -0.02)
