import numpy as np
import pytest

from kriformer.errors import CheckpointError, ParameterError, ShapeError
from kriformer.graph import SensorGraph
from kriformer.model import (ABLATIONS, Hyper, apply_ablation, forward, init_model, load_checkpoint,
                             parameter_count, save_checkpoint)
from kriformer.training import NormStats

TINY = Hyper(D=8, n_heads=2, n_enc=1, n_dec=1, dropout=0.0)


def line_graph(n=6, spacing=1.0):
    pos = np.arange(n) * spacing
    d = np.abs(pos[:, None] - pos[None, :])
    return SensorGraph(tuple(f"s{i}" for i in range(n)), d, sigma=2.0)


@pytest.fixture
def tiny():
    return init_model(TINY, line_graph(), seed=0)


def test_default_hyper():
    h = Hyper()
    assert (h.D, h.n_heads, h.n_enc, h.n_dec, h.dropout, h.C) == (64, 4, 2, 2, 0.2, 1)


@pytest.mark.parametrize("kwargs", [dict(D=10, n_heads=4), dict(D=7, n_heads=1), dict(n_enc=0),
                                    dict(dropout=1.0), dict(merge_mode="stack"), dict(k=0)])
def test_invalid_hyper(kwargs):
    with pytest.raises(ParameterError):
        Hyper(**kwargs).validate()


def test_k_must_be_below_n():
    with pytest.raises(ParameterError):
        init_model(Hyper(D=8, n_heads=2, k=6), line_graph())


def test_same_seed_same_parameters():
    a, b = init_model(TINY, line_graph(), 3), init_model(TINY, line_graph(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


@pytest.mark.parametrize("hyper", [TINY, Hyper(), Hyper(D=16, n_heads=4, n_enc=3, n_dec=1, merge_mode="concat"),
                                   Hyper(C=2, D=12, n_heads=3, merge_mode="multiply")])
def test_parameter_count_closed_form(hyper):
    m = init_model(hyper, line_graph(8))
    assert m.n_parameters() == parameter_count(hyper.C, hyper.D, hyper.n_heads, hyper.n_enc,
                                               hyper.n_dec, m.hyper.k, hyper.merge_mode)


def test_forward_shape_and_determinism(tiny):
    x = np.random.default_rng(0).standard_normal((8, 6, 1))
    out = forward(tiny, x)
    assert out.shape == (8, 6, 1)
    assert np.array_equal(out.data, forward(tiny, x).data)
    assert forward(tiny, np.stack([x, x])).shape == (2, 8, 6, 1)


def test_forward_shape_errors(tiny):
    with pytest.raises(ShapeError):
        forward(tiny, np.zeros((8, 5, 1)))
    with pytest.raises(ShapeError):
        forward(tiny, np.zeros((8, 6, 2)))


def test_dropout_needs_rng_and_is_seeded():
    m = init_model(Hyper(D=8, n_heads=2, n_enc=1, n_dec=1, dropout=0.5), line_graph(), 0)
    x = np.random.default_rng(1).standard_normal((8, 6, 1))
    with pytest.raises(ParameterError):
        forward(m, x, training=True)
    a = forward(m, x, training=True, rng=np.random.default_rng(5)).data
    b = forward(m, x, training=True, rng=np.random.default_rng(5)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, forward(m, x).data)


def test_no_ste_ignores_embedding_parameters(tiny):
    m = apply_ablation(tiny, "no_STE")
    x = np.random.default_rng(2).standard_normal((8, 6, 1))
    before = forward(m, x).data
    for p in m.ste.parameters().values():
        p.data = p.data + 1.0
    assert np.array_equal(forward(m, x).data, before)


@pytest.mark.parametrize("variant", ABLATIONS)
def test_every_ablation_changes_output(tiny, variant):
    x = np.random.default_rng(3).standard_normal((8, 6, 1))
    assert not np.allclose(forward(apply_ablation(tiny, variant), x).data, forward(tiny, x).data)


def test_none_variant_is_identity(tiny):
    x = np.random.default_rng(4).standard_normal((8, 6, 1))
    assert np.array_equal(forward(apply_ablation(tiny, "none"), x).data, forward(tiny, x).data)
    with pytest.raises(ParameterError):
        apply_ablation(tiny, "no_FFN")


def test_no_te_ste_is_node_only(tiny):
    ste = apply_ablation(tiny, "no_TE").spatiotemporal_embedding(5).data
    assert np.all(ste == ste[:1])


def test_output_depends_on_observed_neighbour(tiny):
    x = np.random.default_rng(5).standard_normal((8, 6, 1))
    x2 = x.copy()
    x2[:, 2] = 0.0
    diff = np.abs(forward(tiny, x).data - forward(tiny, x2).data)
    assert diff[:, [1, 3]].max() > 0


def test_joint_permutation_equivariance(tiny):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 6, 1))
    perm = rng.permutation(6)
    permuted = apply_ablation(tiny, "none")
    permuted.se_raw = tiny.se_raw[perm]
    permuted.mask = tiny.mask[np.ix_(perm, perm)]
    permuted.node_ids = tuple(tiny.node_ids[i] for i in perm)
    out, out_p = forward(tiny, x).data, forward(permuted, x[:, perm]).data
    assert np.max(np.abs(out_p - out[:, perm])) <= 1e-9


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bitwise(tiny, tmp_path):
    m = apply_ablation(tiny, "no_MSA")
    m.norm = NormStats(3.0, 2.0)
    m.meta = {"window": 8, "seed": 1}
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(7).standard_normal((8, 6, 1))
    assert np.array_equal(forward(back, x).data, forward(m, x).data)
    assert back.ablations == {"no_MSA"} and back.norm == m.norm and back.meta == m.meta
    assert back.node_ids == m.node_ids and back.graph_fingerprint == m.graph_fingerprint


def test_checkpoint_truncated(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_corrupt_payload(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    save_checkpoint(tiny, path)
    blob = bytearray(path.read_bytes())
    blob[8] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
