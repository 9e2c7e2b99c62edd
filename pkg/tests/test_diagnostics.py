import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scalecal.data import synthetic_dataset
from scalecal.diagnostics import (DIST_HEADER, DIV_HEADER, METRICS, StageDistributionRecord, distribution_divergence,
                                  divergence_report, emit_report, overlay_series, probe_activations,
                                  read_distributions, read_divergence)
from scalecal.models import ModelConfig, build_model
from scalecal.resample import ScaleSet

SCALES = ScaleSet([32, 16])


def record(values, stage=0, scale=0, bins=64, value_range=(-8.0, 8.0)):
    r = StageDistributionRecord(stage, scale, (32, 32), np.zeros(bins, np.int64), value_range)
    r.add(np.asarray(values))
    return r


def one_bin(k, bins=16):
    h = np.zeros(bins, np.int64)
    h[k] = 100
    return StageDistributionRecord(0, 0, (8, 8), h, (-8.0, 8.0), 100)


@given(st.lists(st.lists(st.floats(-20, 20), min_size=1, max_size=30), min_size=1, max_size=5))
def test_record_merge_matches_direct_statistics(chunks):
    r = record([])
    for c in chunks:
        r.add(np.array(c))
    allv = np.concatenate([np.array(c) for c in chunks])
    assert r.histogram.sum() == r.sample_count == allv.size
    assert r.mean == pytest.approx(allv.mean(), abs=1e-9)
    assert r.variance >= 0 and r.variance == pytest.approx(allv.var(), rel=1e-9, abs=1e-9)


def test_outliers_clamp_into_edge_bins():
    r = record([-100.0, 100.0, 0.1])
    assert r.histogram[0] == 1 and r.histogram[-1] == 1 and r.histogram.sum() == 3


@given(st.integers(0, 10_000), st.sampled_from(METRICS))
def test_divergence_axioms(seed, metric):
    rng = np.random.default_rng(seed)
    a = record(rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), 500))
    b = record(rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), 500))
    assert distribution_divergence(a, a, metric) == 0.0
    assert distribution_divergence(a, b, metric) >= 0.0
    assert distribution_divergence(a, b, metric) == pytest.approx(distribution_divergence(b, a, metric), abs=1e-12)


@given(st.integers(0, 15), st.integers(0, 15))
def test_w1_between_single_bins_is_centre_distance(i, j):
    a, b = one_bin(i), one_bin(j)
    assert distribution_divergence(a, b, "w1") == pytest.approx(abs(a.bin_centers[i] - b.bin_centers[j]))


def test_w1_of_unit_shifted_gaussians():
    rng = np.random.default_rng(0)
    a, b = record(rng.normal(0, 1, 100_000)), record(rng.normal(1, 1, 100_000))
    assert abs(distribution_divergence(a, b, "w1") - 1.0) < 0.05


def test_divergence_rejects_mismatched_binning_and_unknown_metric():
    with pytest.raises(ValueError):
        distribution_divergence(record([0.0]), record([0.0], bins=32))
    with pytest.raises(ValueError):
        distribution_divergence(record([0.0]), record([0.0]), "kl")


def probe_model(seed=0):
    model = build_model(ModelConfig(depth=8, norm="sbn", width_multiplier=0.25), SCALES, seed=seed)
    rng = np.random.default_rng(seed)
    for name, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if "var" in name else rng.normal(0, 0.2, buf.shape)
    return model


def test_probe_bookkeeping_and_purity():
    model, data = probe_model(), synthetic_dataset(0, 24)
    recs = probe_activations(model, data, SCALES, batch_size=10)
    again = probe_activations(model, data, SCALES, batch_size=7)
    assert len(recs) == 6 and {(r.stage_index, r.scale_index) for r in recs} == {(s, k) for s in range(3) for k in range(2)}
    for r, q in zip(recs, again):
        assert np.array_equal(r.histogram, q.histogram) and r.sample_count == q.sample_count
        assert r.mean == pytest.approx(q.mean, rel=1e-9)
    by = {(r.stage_index, r.scale_index): r for r in recs}
    assert by[0, 0].sample_count == 24 * 4 * 32 * 32 and by[2, 1].sample_count == 24 * 16 * 4 * 4
    for m in METRICS:
        rep = divergence_report(recs, m)
        assert [(s, p) for s, p, _ in rep.entries] == [(0, (0, 1)), (1, (0, 1)), (2, (0, 1))]
    assert model.taps == [] and not model.probing


def test_probe_rejects_empty_slice_and_unregistered_scale():
    model, data = probe_model(), synthetic_dataset(0, 10)
    with pytest.raises(ValueError):
        probe_activations(model, data.images[:0], SCALES)
    with pytest.raises(KeyError):
        probe_activations(model, data, ScaleSet([32, 24]))


def test_constant_network_gives_zero_variance_records():
    model = build_model(ModelConfig(depth=8, norm="bn", width_multiplier=0.25))
    for p in model.parameters():
        p.data[...] = 0.0
    recs = probe_activations(model, synthetic_dataset(0, 10), SCALES)
    assert all(r.variance == 0.0 and r.histogram.max() == r.sample_count for r in recs)


def test_emit_and_read_round_trip(tmp_path):
    recs = probe_activations(probe_model(), synthetic_dataset(0, 12), SCALES)
    reports = [divergence_report(recs, m) for m in METRICS]
    dist, div = emit_report(recs, reports, tmp_path / "out")
    header = next(csv.reader(open(dist)))
    assert header[:4] == ["stage", "scale", "bin_center", "count"] and header == DIST_HEADER
    assert sum(1 for _ in open(dist)) == 1 + 6 * 64
    back = sorted(read_distributions(dist), key=lambda r: (r.stage_index, r.scale_index))
    for r, q in zip(sorted(recs, key=lambda r: (r.stage_index, r.scale_index)), back):
        assert np.array_equal(r.histogram, q.histogram) and r.size == q.size
        assert (r.sample_count, r.mean, r.variance, r.value_range) == (q.sample_count, q.mean, q.variance, q.value_range)
    rows = read_divergence(div)
    assert len(rows) == 6 and {m for *_, m, _ in rows} == set(METRICS)
    assert rows[0][4] == reports[0].entries[0][2]
    ordered = sorted(recs, key=lambda r: (r.stage_index, r.scale_index))
    for m in METRICS:
        assert distribution_divergence(back[0], back[1], m) == distribution_divergence(ordered[0], ordered[1], m)


def test_empty_record_set_writes_headers_only(tmp_path):
    dist, div = emit_report([], [], tmp_path)
    assert open(dist).read().strip() == ",".join(DIST_HEADER)
    assert open(div).read().strip() == ",".join(DIV_HEADER)


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8]))
def test_overlay_densities_integrate_to_one(seed, rebin):
    rng = np.random.default_rng(seed)
    recs = [record(rng.normal(0, 2, 300), stage=s, scale=k) for s in range(2) for k in range(2)]
    rows = overlay_series(recs, rebin)
    assert len(rows) == 2 * 64 // rebin
    width = 16.0 / (64 // rebin)
    for s in range(2):
        dens = np.array([r[2:] for r in rows if r[0] == s])
        np.testing.assert_allclose(dens.sum(axis=0) * width, 1.0)
    with pytest.raises(ValueError):
        overlay_series(recs, 0)
