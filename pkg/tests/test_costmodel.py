import numpy as np
import pandas as pd
import pytest
from pmodlab import numerics
from pmodlab.config import RunConfig
from pmodlab.costmodel import (WorkloadSpec, model_cost, kv_ratio, layer_flops, layer_macs, router_macs, causal_pairs)
from pmodlab.models import Model, ModelConfig, KvCache, block_forward, layer_params
from pmodlab.pmod import PModConfig, Router, layer_forward, n_selected
from pmodlab.reports import read_table
from pmodlab.schedule import ScheduleConfig, build_schedule, search_thresholds
from pmodlab.models import TokenSequence

LLAMA_7B = ModelConfig(n_layers = 32, d_model = 4096, n_heads = 32, d_ff = 11008, vocab_size = 32000, max_seq = 4096)
WORKLOAD = WorkloadSpec(n_vision = 2880, n_text_prompt = 64, n_decode = 16)


def _random_configs(n = 20):
    rng = np.random.default_rng(0)
    for _ in range(n):
        heads = int(rng.integers(1, 4))
        dh = 2 * int(rng.integers(1, 5))
        yield ModelConfig(n_layers = 1, d_model = heads * dh, n_heads = heads, d_ff = int(rng.integers(1, 33)),
                          vocab_size = 8, max_seq = 64), int(rng.integers(1, 13)), int(rng.integers(0, 5))


def test_layer_flops_examples():
    assert layer_flops(LLAMA_7B, 0, 0) == 0
    wider = ModelConfig(n_layers = 32, d_model = 4096, n_heads = 32, d_ff = 11009, vocab_size = 32000, max_seq = 4096)
    assert layer_flops(wider, 10, 55) - layer_flops(LLAMA_7B, 10, 55) == 10 * (2 * 3 * 4096 + 5)


def test_block_macs_match_the_analytic_count():
    for config, n_v, n_t in _random_configs():
        lp = layer_params(Model.init(config, 0).params, 0)
        m = n_v + n_t
        x = np.random.default_rng(m).normal(size = (m, config.d_model))
        with numerics.count_ops() as counter:
            block_forward(config, lp, x, np.arange(m))
        assert counter.macs == layer_macs(config, m, causal_pairs(m))


def test_routed_layer_macs_match_the_analytic_count():
    for config, n_v, n_t in _random_configs():
        lp = layer_params(Model.init(config, 1).params, 0)
        rng = np.random.default_rng(n_v)
        seq = TokenSequence.build(rng.normal(size = (n_v, config.d_model)), rng.normal(size = (n_t, config.d_model)))
        router = Router(rng.normal(size = config.d_model), np.zeros(1))
        with numerics.count_ops() as counter:
            layer_forward(config, lp, router, PModConfig(), 0.5, seq)
        m = n_selected(n_v, 0.5) + n_t
        assert counter.macs == layer_macs(config, m, causal_pairs(m)) + router_macs(config, n_v)


def test_decode_macs_match_the_analytic_count():
    config = ModelConfig(n_layers = 1, d_model = 8, n_heads = 2, d_ff = 12, vocab_size = 8, max_seq = 64)
    lp = layer_params(Model.init(config, 2).params, 0)
    x = np.random.default_rng(2).normal(size = (7, 8))
    cache = KvCache(1)
    block_forward(config, lp, x[:6], np.arange(6), cache, 0)
    with numerics.count_ops() as counter:
        block_forward(config, lp, x[6:], np.array([6]), cache, 0)
    assert counter.macs == layer_macs(config, 1, 7)


def test_full_retention_costs_nothing_extra():
    report = model_cost(LLAMA_7B, np.ones(32), WORKLOAD)
    assert report.flops_ratio == 1.0
    assert report.kv_ratio == 1.0
    assert report.vision_kv_ratio == 1.0


def test_baseline_matches_reference_budget():
    report = model_cost(LLAMA_7B, np.ones(32), WORKLOAD)
    assert abs(report.baseline_total_flops - 39.46e12) / 39.46e12 < 0.05
    assert report.baseline_total_flops == report.flops.sum() + report.head_flops


def test_searched_schedule_flops_ratio():
    schedule = build_schedule(search_thresholds(0.537, 0.5, 32).config)
    report = model_cost(LLAMA_7B, schedule, WORKLOAD)
    assert 0.53 <= report.flops_ratio <= 0.59
    assert report.total_flops == report.flops.sum() + report.head_flops
    frame = report.to_frame()
    assert frame['flops'].sum() == report.flops.sum()


@pytest.mark.parametrize("beta, target", [(0.5, 0.537), (0.4, 0.475), (0.3, 0.423)])
def test_vision_kv_ratio_follows_mean_retention(beta, target):
    schedule = build_schedule(search_thresholds(target, beta, 32).config)
    ratio = kv_ratio(schedule, 2880)
    assert abs(ratio - schedule.mean_retention) <= 1 / 2880 + 1e-12
    assert abs(ratio - target) <= 0.005 + 1 / 2880
    assert model_cost(LLAMA_7B, schedule, WORKLOAD).vision_kv_ratio == pytest.approx(ratio)


def test_kv_bytes():
    report = model_cost(LLAMA_7B, np.ones(32), WORKLOAD)
    assert report.baseline_kv_bytes == 32 * (2880 + 64 + 16) * 2 * 4096 * 2
    custom = model_cost(LLAMA_7B, np.ones(32), WorkloadSpec(kv_bytes_per_token_per_layer = 100))
    assert custom.total_kv_bytes == 32 * (2880 + 64 + 16) * 100


def test_flops_grow_with_retention():
    previous = 0
    for r in np.round(np.arange(0.05, 1.0, 0.05), 2):
        total = model_cost(LLAMA_7B, np.full(32, r), WORKLOAD).total_flops
        assert total > previous
        previous = total


def test_text_only_workload():
    report = model_cost(LLAMA_7B, np.full(32, 0.5), WorkloadSpec(n_vision = 0, n_text_prompt = 8, n_decode = 2))
    assert report.flops_ratio == 1.0


def test_cost_tables(tmp_path):
    config = RunConfig.load('7b')
    report = model_cost(config.model, config.build_schedule(), config.workload, config.pmod)
    paths = report.to_table(str(tmp_path), 'x_')
    assert [p.split('/')[-1] for p in paths] == ['x_cost.csv', 'x_cost_summary.csv']
    summary = read_table(paths[1], 'cost_summary')
    ratio = float(summary.loc[summary['metric'] == 'flops_ratio', 'value'].iloc[0])
    assert ratio == pytest.approx(report.flops_ratio)
    report.to_table(str(tmp_path), xlsx = True)
    assert set(pd.ExcelFile(str(tmp_path / 'pmodlab_result.xlsx')).sheet_names) == {'cost', 'cost_summary'}
    with pytest.raises(ValueError):
        model_cost(config.model, np.ones(8), config.workload)
