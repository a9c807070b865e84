import os
import numpy as np
import pytest
from pmodlab import harness
from pmodlab.models import ModelConfig
from pmodlab.pmod import PModModel, PModConfig, ReweightMode, Normalizer, n_selected, normalize_weights
from pmodlab.reports import read_table, schema_header
from pmodlab.samples import SynthTask, gen_task
from pmodlab.schedule import ScheduleConfig
from pmodlab.train import TrainConfig


def test_reweight_rows_share_mean_retention():
    rows = harness.reweight_ablation_rows(ScheduleConfig(n_layers = 8))
    assert [r.label for r in rows] == ['vanilla_mod', '+tanh_norm', '+string', '+prd']
    assert [r.pmod.mode for r in rows] == [ReweightMode.VANILLA_MOD, ReweightMode.TANH_NORM_ONLY,
                                           ReweightMode.TANH_NORM_STRING, ReweightMode.TANH_NORM_STRING]
    means = [r.schedule.mean_retention for r in rows]
    assert means[-1] == pytest.approx(0.4625)
    assert max(means) - min(means) <= 1e-12


def test_schedule_rows_share_mean_retention():
    rows = harness.schedule_ablation_rows(8, 0.54)
    assert [r.label for r in rows] == ['constant', 'interleaved', 'stepped', 'linear', 'cosine']
    means = np.array([r.schedule.mean_retention for r in rows])
    assert means.max() - means.min() <= harness.MATCH_TOLERANCE
    assert abs(means[-1] - 0.54) <= 0.005
    interleaved = rows[1].schedule.ratios
    np.testing.assert_array_equal(interleaved[0::2], np.ones(4))


def test_unmatched_rows_are_rejected():
    rows = harness.reweight_ablation_rows(ScheduleConfig(n_layers = 8))
    mismatched = rows[:1] + [harness.AblationRow('other', rows[1].pmod, harness.build_schedule(ScheduleConfig(n_layers = 8, variant = 'constant', ratio = 0.9)))]
    with pytest.raises(ValueError):
        harness._check_matched(mismatched)


def test_ablation_run_writes_tables(tiny_config, tiny_task, tmp_path):
    config = TrainConfig(steps = 1, batch_size = 1, eval_samples = 2)
    results = harness.run_reweight_ablation(tiny_config, tiny_task, config, ScheduleConfig(n_layers = 2, min_ratio = 0.1, max_ratio = 0.9),
                                            seeds = (0, 1), folder = str(tmp_path), prefix = 'p_')
    assert len(results) == 8
    assert [r.label for r in results[:4]] == ['vanilla_mod', '+tanh_norm', '+string', '+prd']
    table = read_table(str(tmp_path / 'p_reweight_ablation.csv'), 'ablation')
    assert len(table) == 8
    assert set(table['seed']) == {0, 1}
    for label in ('vanilla_mod', 'tanh_norm', 'string', 'prd'):
        assert os.path.isfile(tmp_path / f"p_reweight_ablation_schedule_{label}.csv")
    with open(tmp_path / 'p_reweight_ablation.csv', encoding = 'utf-8') as fh:
        assert fh.readline().strip() == schema_header('ablation')


def test_parallel_runs_match_serial(tiny_config, tiny_task):
    config = TrainConfig(steps = 1, batch_size = 1, eval_samples = 2)
    schedule = ScheduleConfig(n_layers = 2, min_ratio = 0.1, max_ratio = 0.9)
    serial = harness.run_reweight_ablation(tiny_config, tiny_task, config, schedule, seeds = (3,), n_jobs = 1)
    parallel = harness.run_reweight_ablation(tiny_config, tiny_task, config, schedule, seeds = (3,), n_jobs = 2)
    assert [r.label for r in serial] == [r.label for r in parallel]
    assert [r.final_loss for r in parallel] == pytest.approx([r.final_loss for r in serial], rel = 1e-9)


def test_probe_with_unchanged_ratio(tiny_config, tiny_task):
    model = PModModel.init(tiny_config, 0, PModConfig(), [0.7, 0.7])
    model = model.with_params({**model.params, 'layers.0.router_w': np.random.default_rng(0).normal(size = 16)})
    samples = gen_task(tiny_task, 16, 4)
    table = harness.probe_layer_groups(model, samples, (0.7, 0.3))
    assert list(table.columns) == ['group', 'layers', 'ratio', 'accuracy', 'kl_divergence']
    assert len(table) == 6
    unchanged = table[table['ratio'] == 0.7]
    assert np.all(unchanged['kl_divergence'] == 0.0)
    assert np.all(table['kl_divergence'] >= 0.0)


def test_trace_rows(tiny_config, tiny_task):
    model = PModModel.init(tiny_config, 0, PModConfig(), [1.0, 0.25])
    samples = gen_task(tiny_task, 16, 3)
    records = harness.emit_trace(model, samples)
    assert len(records) == 3
    assert {r.layer for r in records} == {2}
    frame = harness.trace_frame(records)
    assert len(frame) == 3 * 8
    assert frame.groupby('sample')['selected'].sum().tolist() == [n_selected(8, 0.25)] * 3
    assert harness.trace_frame([]).empty


def test_overflow_demo():
    table = harness.overflow_demo(32, 0.2)
    assert table['case'].tolist() == ['no_normalization', 'tanh_norm_alpha_1', 'tanh_norm_alpha_0.2']
    assert table['first_overflow_layer_fp16'].tolist() == ['16', '16', 'stable']
    assert table['first_overflow_layer_fp64'].tolist() == ['stable'] * 3



def test_normalization_rows_share_range():
    rows = harness.normalization_ablation_rows(ScheduleConfig(n_layers = 8))
    assert [r.label for r in rows] == ['tanh', 'softmax', 'shifted_softmax']
    assert [r.pmod.normalizer for r in rows] == [Normalizer.TANH, Normalizer.SOFTMAX, Normalizer.SHIFTED_SOFTMAX]
    assert all(r.pmod.mode == ReweightMode.TANH_NORM_STRING for r in rows)
    assert (rows[2].pmod.alpha, rows[2].pmod.softmax_shift) == (pytest.approx(0.4), pytest.approx(-0.2))
    assert len({r.schedule.mean_retention for r in rows}) == 1
    raw = np.random.default_rng(0).normal(0, 3, 64)
    tanh, softmax, shifted = (normalize_weights(raw, r.pmod) for r in rows)
    assert np.all(np.abs(tanh) < 0.2) and np.all(np.abs(shifted) < 0.2)
    assert np.all((softmax > 0) & (softmax < 0.2))
    assert shifted.mean() == pytest.approx(0.4 / 64 - 0.2)


def test_normalization_ablation_run(tiny_config, tiny_task, tmp_path):
    config = TrainConfig(steps = 1, batch_size = 1, eval_samples = 2)
    results = harness.run_normalization_ablation(tiny_config, tiny_task, config, ScheduleConfig(n_layers = 2), seeds = (0,), folder = str(tmp_path))
    assert [r.label for r in results] == ['tanh', 'softmax', 'shifted_softmax']
    table = read_table(str(tmp_path / 'normalization_ablation.csv'), 'ablation')
    assert table['experiment'].tolist() == ['normalization_ablation'] * 3
    assert np.all(np.isfinite(table['final_loss']))


def _majority(flags):
    return sum(bool(f) for f in flags) > len(flags) / 2


SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope = 'module')
def reference_runs():
    """Constant-ratio reference models of the layer-group probe, one per seed, with their evaluation samples."""
    config = ModelConfig(n_layers = 8, d_model = 64, n_heads = 4, d_ff = 128, vocab_size = 16, max_seq = 128)
    runs = []
    for seed in SEEDS:
        task = SynthTask(seed = seed)
        run = harness.train_probe_model(config, task, TrainConfig(steps = 400), seed = seed)
        runs.append((run.model, gen_task(task, 64, 64)))
    return runs


@pytest.fixture(scope = 'module')
def group_tables(reference_runs):
    return [harness.probe_layer_groups(model, samples, (0.7, 0.5, 0.3, 0.1)) for model, samples in reference_runs]


@pytest.mark.slow
@pytest.mark.parametrize("ratio", [0.5, 0.3, 0.1])
def test_deep_layers_tolerate_lower_ratios(group_tables, ratio):
    flags = []
    for table in group_tables:
        kl = table[table['ratio'] == ratio].set_index('group')['kl_divergence']
        flags.append(kl['deep'] < kl['shallow'])
    assert _majority(flags)


@pytest.mark.slow
def test_divergence_grows_as_ratio_falls(group_tables):
    ratios = (0.7, 0.5, 0.3, 0.1)
    for group in ('shallow', 'middle', 'deep'):
        curve = [np.mean([t[(t['group'] == group) & (t['ratio'] == r)]['kl_divergence'].iloc[0] for t in group_tables]) for r in ratios]
        for before, after in zip(curve, curve[1:]):
            assert after >= 0.95 * before, (group, curve)


@pytest.mark.slow
def test_trained_layers_select_different_tokens(reference_runs):
    flags = []
    for model, samples in reference_runs:
        records = harness.emit_trace(model, samples[:16])
        per_sample = {}
        for r in records:
            per_sample.setdefault(r.sample, set()).add(tuple(r.selected.tolist()))
        flags.append(np.mean([len(sets) > 1 for sets in per_sample.values()]) > 0.5)
    assert _majority(flags)


@pytest.mark.slow
def test_reweighting_helps_at_matched_budget(toy_config):
    results = harness.run_reweight_ablation(toy_config, SynthTask(seed = 0), TrainConfig(steps = 400), ScheduleConfig(n_layers = 8),
                                            seeds = SEEDS, n_jobs = -1)
    accuracy = {(r.label, r.seed): r.accuracy for r in results}
    assert _majority([accuracy['+prd', s] >= accuracy['vanilla_mod', s] for s in SEEDS])


@pytest.mark.slow
def test_decaying_schedules_beat_flat_ones(toy_config):
    results = harness.run_schedule_ablation(toy_config, SynthTask(seed = 0), TrainConfig(steps = 400), 0.54, seeds = SEEDS, n_jobs = -1)
    accuracy = {(r.label, r.seed): r.accuracy for r in results}
    flags = []
    for s in SEEDS:
        decaying = np.mean([accuracy['linear', s], accuracy['cosine', s]])
        flat = np.mean([accuracy['constant', s], accuracy['interleaved', s]])
        flags.append(decaying >= flat)
    assert _majority(flags)
