import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvq import evaluation, qnet, trainer
from mvq.config import ConfigError
from mvq.evaluation import EvalReport, compare_architectures, failure_rate_reduction
from mvq.qnet import Arch, ArchConfig, ViewMask

SMALL = ArchConfig(resolution=16)
FAST = dict(cem_config=trainer.CemConfig(n_samples=8, n_elites=2, n_iterations=1))


def report(arch, rate, n=700, seed=0, task="Insertion", per=None):
    return EvalReport(arch, task, n, rate, f"{arch}.mvq", seed, per or {"All": rate})


@pytest.mark.parametrize("base,ours,expected", [(61.0, 31.0, 49.18), (61.0, 26.33, 56.84), (61.0, 21.92, 64.07)])
def test_failure_rate_reduction_arithmetic(base, ours, expected):
    assert failure_rate_reduction(base, ours) == pytest.approx(expected, abs=1e-2)


def test_failure_rate_reduction_edges():
    assert failure_rate_reduction(40.0, 40.0) == 0.0
    assert failure_rate_reduction(40.0, 0.0) == 100.0
    assert failure_rate_reduction(40.0, 60.0) == -50.0
    with pytest.raises(ValueError):
        failure_rate_reduction(0.0, 10.0)


@given(st.floats(0.1, 100), st.floats(0, 100))
def test_reduction_is_relative(base, ours):
    r = failure_rate_reduction(base, ours)
    assert ours == pytest.approx(base * (1 - r / 100), abs=1e-9)


def test_compare_architectures_checks_inputs():
    rows = compare_architectures([report("SV_Shoulder", 40.0), report("MV_Dropout", 70.0)])
    assert rows[0]["failure_reduction"] == 0.0 and rows[1]["failure_reduction"] == pytest.approx(50.0)
    rows = compare_architectures([report("SV_Shoulder", 40.0), report("MV_Dropout", 70.0)], baseline="MV_Dropout")
    assert rows[0]["failure_reduction"] == pytest.approx(-100.0)
    with pytest.raises(ConfigError):
        compare_architectures([report("A", 1.0), report("B", 2.0, task="StackingI")])
    with pytest.raises(ConfigError):
        compare_architectures([report("A", 1.0), report("B", 2.0, n=100)])
    with pytest.raises(ConfigError):
        compare_architectures([report("A", 1.0)], baseline="Z")
    with pytest.raises(ConfigError):
        compare_architectures([])


def test_report_invariants():
    with pytest.raises(ValueError):
        report("A", 101.0)
    assert report("A", 30.0).failure_rate == 70.0


def test_wilson_interval_brackets_the_rate():
    lo, hi = evaluation.wilson_interval(140, 700)
    assert lo < 0.2 < hi and hi - lo < 0.07
    assert evaluation.wilson_interval(0, 10)[0] == 0.0


def test_report_csv_round_trip():
    per = {"All": 60.0, "Shoulder+Left": 55.0, "Right": 20.0}
    reps = [report("MV_Dropout", 60.0, per=per), report("MV_Towers", 50.0)]
    text = "".join(evaluation.to_csv(evaluation.report_rows(r)) for r in reps[:1])
    back = evaluation.reports_from_csv(text)
    assert back[0].per_subset == per and back[0].success_rate == 60.0


def test_parse_view_subset():
    assert evaluation.parse_view_subset("All") == ViewMask.all(3)
    assert evaluation.parse_view_subset("Shoulder+Right") == ViewMask((True, False, True))
    assert evaluation.parse_view_subset("1") == ViewMask((False, True, False))
    with pytest.raises(ConfigError):
        evaluation.parse_view_subset("Top")


def test_scripted_evaluation_is_seeded():
    a = evaluation.evaluate("scripted", "Insertion", 40, seed=3)
    b = evaluation.evaluate("scripted", "Insertion", 40, seed=3)
    assert a == b and a.architecture == "scripted" and a.n_episodes == 40
    assert a.successes == round(a.success_rate * 40 / 100)


def test_evaluate_rejects_bad_requests(tmp_path):
    with pytest.raises(ConfigError):
        evaluation.evaluate("scripted", "Insertion", 0)
    with pytest.raises(ConfigError):
        evaluation.evaluate("scripted", "Juggling", 5)
    with pytest.raises(ConfigError):
        evaluation.evaluate(tmp_path / "missing.mvq", "Insertion", 5)
    state = trainer.new_train_state(Arch.MV_Dropout, 0, SMALL)
    path = trainer.save_checkpoint(state, tmp_path / "c.mvq", trainer.ExperimentConfig(task="StackingI"))
    with pytest.raises(ConfigError):
        evaluation.evaluate(path, "Insertion", 5)
    with pytest.raises(ConfigError):
        evaluation.evaluate(state.online, "Insertion", 2, ViewMask.all(2))
    sv = trainer.new_train_state(Arch.SV_Shoulder, 0, SMALL)
    with pytest.raises(ConfigError):
        evaluation.robustness_matrix(sv.online, "Insertion", 2)


def test_learned_evaluation_is_deterministic_and_counts_episodes():
    p = qnet.init_params(Arch.MV_Dropout, 0, SMALL)
    a = evaluation.evaluate(p, "Insertion", 3, ViewMask.only(3, 1), seed=1, **FAST)
    b = evaluation.evaluate(p, "Insertion", 3, ViewMask.only(3, 1), seed=1, **FAST)
    assert a == b and a.view_subset == "Left" and a.n_episodes == 3


def test_towers_subset_zero_fills(monkeypatch):
    seen = []
    real = trainer.collect_episode

    def spy(source, *a, **k):
        seen.append((source.mask, source.zero_views))
        return real(source, *a, **k)
    monkeypatch.setattr(evaluation, "collect_episode", spy)
    towers = qnet.init_params(Arch.MV_Towers, 0, SMALL)
    dropout = qnet.init_params(Arch.MV_Dropout, 0, SMALL)
    cfg = trainer.CemConfig(n_samples=4, n_elites=1, n_iterations=1)
    evaluation.evaluate(towers, "Insertion", 1, ViewMask.only(3, 0), cem_config=cfg)
    evaluation.evaluate(dropout, "Insertion", 1, ViewMask.only(3, 0), cem_config=cfg)
    assert seen == [(None, (1, 2)), (ViewMask.only(3, 0), ())]


def test_robustness_matrix_covers_every_subset(monkeypatch):
    monkeypatch.setattr(evaluation, "_episode_successes",
                        lambda policy, task, n, subset, *a: [subset is None or subset.count > 1] * n)
    p = qnet.init_params(Arch.MV_Dropout, 0, SMALL)
    r = evaluation.robustness_matrix(p, "Insertion", 4)
    assert list(r.per_subset) == ["All", "Shoulder+Left", "Shoulder+Right", "Left+Right", "Shoulder", "Left", "Right"]
    assert r.success_rate == 100.0 and r.per_subset["Right"] == 0.0
    rows = evaluation.report_rows(r)
    assert len(rows) == 7 and evaluation.reports_from_csv(evaluation.to_csv(rows))[0].per_subset == r.per_subset
