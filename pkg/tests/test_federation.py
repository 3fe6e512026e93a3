import math

import numpy as np
import pytest

from fglleak.errors import ConfigError
from fglleak.federation import (
    DefenseConfig,
    FederationConfig,
    RoundTranscript,
    add_laplace_noise,
    aggregate,
    apply_gradient_compression,
    client_update,
    load_transcripts,
    run_federation,
    save_transcripts,
)
from fglleak.graph import AuxiliarySpec, DatasetPartition, generate_auxiliary, partition_dirichlet
from fglleak.nn import GradientBundle, backward_analytic, forward, init_params


def flat_bundle(values):
    return GradientBundle([np.array(values, dtype=float).reshape(1, -1)], np.zeros((1, 0)), np.zeros(0))


def small_setup(seed=0, count=20):
    spec = AuxiliarySpec("erdos-renyi", "onehot", count, 8, p=0.3, feature_dim=4, classes=2)
    graphs = generate_auxiliary(spec, seed)
    params = init_params(4, 6, 2, 2, np.random.default_rng(seed))
    return graphs, params


def test_defense_parse_and_tags():
    assert DefenseConfig.parse("none").tag == "none"
    d = DefenseConfig.parse("dp-hybrid:0.2")
    assert d.gradient_noise == d.activation_noise == pytest.approx(0.1)
    assert DefenseConfig.parse("gradient-compression:0.9").prune_ratio == 0.9
    for bad in ("bogus:1", "dp-gradients:x", "gradient-compression:1.0"):
        with pytest.raises(ConfigError):
            DefenseConfig.parse(bad)


def test_compression_examples():
    out = apply_gradient_compression(flat_bundle([1, -2, 3, -4]), 0.5)
    np.testing.assert_array_equal(out.flat(), [0, 0, 3, -4])
    b = flat_bundle([1, -2, 3, -4])
    np.testing.assert_array_equal(apply_gradient_compression(b, 0.0).flat(), b.flat())


def test_compression_ties_prune_later_index_first():
    out = apply_gradient_compression(flat_bundle([2, 1, -1, 3]), 0.25)
    np.testing.assert_array_equal(out.flat(), [2, 1, 0, 3])


def test_compression_counts():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=10000)
    vals[:37] = 0.0
    out = apply_gradient_compression(flat_bundle(vals), 0.99).flat()
    assert int((out == 0).sum()) == math.ceil(0.99 * 10000)
    # pre-existing zeros are the smallest magnitudes, so they count towards the budget
    keep_max = apply_gradient_compression(flat_bundle(rng.normal(size=50)), 0.98).flat()
    assert int(np.count_nonzero(keep_max)) == 1


def test_laplace_mean_abs_and_symmetry():
    rng = np.random.default_rng(1)
    b = 0.3
    noisy = add_laplace_noise(flat_bundle(np.zeros(10000)), b, rng).flat()
    assert abs(np.mean(np.abs(noisy)) - b) < 0.05 * b
    assert abs(np.mean(noisy > 0) - 0.5) < 0.02


def test_client_update_none_matches_backward():
    graphs, params = small_setup()
    rng = np.random.default_rng(0)
    out = client_update(params, graphs[:1], DefenseConfig(), rng)
    ref = backward_analytic(forward(params, graphs[0]), params, graphs[0])
    np.testing.assert_array_equal(out.flat(), ref.flat())


def test_aggregate_examples():
    graphs, params = small_setup()
    b = client_update(params, graphs[:1], DefenseConfig(), np.random.default_rng(0))
    stepped = aggregate([b], [1.0], params, 0.1)
    for p, g, q in zip(params.arrays(), b.arrays(), stepped.arrays()):
        np.testing.assert_allclose(q, p - 0.1 * g, atol=0)
    neg = b.from_flat(-b.flat())
    same = aggregate([b, neg], [0.5, 0.5], params, 0.1)
    for p, q in zip(params.arrays(), same.arrays()):
        np.testing.assert_array_equal(p, q)
    bundles = [client_update(params, [g], DefenseConfig(), np.random.default_rng(0)) for g in graphs[:3]]
    w = [0.2, 0.3, 0.5]
    out = aggregate(bundles, w, params, 0.05)
    for k, p in enumerate(params.arrays()):
        acc = np.zeros_like(p)
        for wi, bi in zip(w, bundles):
            acc = acc + wi * bi.arrays()[k]
        np.testing.assert_allclose(out.arrays()[k], p - 0.05 * acc, atol=1e-15)
    with pytest.raises(ConfigError):
        aggregate(bundles, [0.2, 0.3, 0.6], params, 0.05)


def test_federation_zero_rounds_and_determinism(tmp_path):
    graphs, params = small_setup()
    part = partition_dirichlet(graphs, 2, 1.0, 0)
    tr, final = run_federation(graphs, part, FederationConfig(2, 0, 2, 0.1, 0), DefenseConfig(), params)
    assert tr == [] and all(np.array_equal(a, b) for a, b in zip(final.arrays(), params.arrays()))

    cfg = FederationConfig(2, 3, 2, 0.1, 4)
    defense = DefenseConfig.parse("dp-gradients:0.05")
    a, _ = run_federation(graphs, part, cfg, defense, params)
    b, _ = run_federation(graphs, part, cfg, defense, params)
    save_transcripts(a, tmp_path / "a")
    save_transcripts(b, tmp_path / "b")
    for pa, pb in zip(sorted((tmp_path / "a").iterdir()), sorted((tmp_path / "b").iterdir())):
        assert pa.read_bytes() == pb.read_bytes()
    back = load_transcripts(tmp_path / "a")
    assert [t.to_dict() for t in back] == [t.to_dict() for t in a]


def test_transcript_aggregation_identity():
    graphs, params = small_setup()
    part = partition_dirichlet(graphs, 3, 1.0, 1)
    transcripts, _ = run_federation(graphs, part, FederationConfig(3, 2, 1, 0.1, 0), DefenseConfig(), params)
    for t in transcripts:
        assert abs(sum(t.client_weights) - 1.0) <= 1e-12
        again = aggregate(t.client_bundles, t.client_weights, t.params_before, 0.1)
        for x, y in zip(again.arrays(), t.params_after.arrays()):
            np.testing.assert_allclose(x, y, atol=1e-12)


def test_single_client_single_round_is_gradient_step():
    graphs, params = small_setup()
    part = DatasetPartition((tuple(range(len(graphs))),), 1.0)
    (t,), final = run_federation(graphs, part, FederationConfig(1, 1, 1, 0.1, 0), DefenseConfig(), params)
    (idx,) = t.batch_indices[0]
    g = graphs[idx]
    ref = backward_analytic(forward(params, g), params, g)
    for p, gr, q in zip(params.arrays(), ref.arrays(), final.arrays()):
        np.testing.assert_allclose(q, p - 0.1 * gr, atol=1e-15)


def test_training_reduces_loss():
    graphs, params = small_setup(count=30)
    part = DatasetPartition((tuple(range(30)),), 1.0)
    _, final = run_federation(graphs, part, FederationConfig(1, 60, 30, 0.2, 0), DefenseConfig(), params)

    def mean_loss(p):
        return np.mean([forward(p, g).loss for g in graphs])

    assert mean_loss(final) < mean_loss(params)


def test_transcript_dict_round_trip():
    graphs, params = small_setup()
    part = partition_dirichlet(graphs, 2, 1.0, 0)
    (t,), _ = run_federation(graphs, part, FederationConfig(2, 1, 1, 0.1, 0), DefenseConfig(), params)
    assert RoundTranscript.from_dict(t.to_dict()).to_dict() == t.to_dict()
