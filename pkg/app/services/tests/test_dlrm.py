import numpy as np
import pytest
from pydantic.v1 import ValidationError

from app.services.comm import create_comm
from app.services.dlrm import (
    DlrmModel,
    ModelConfig,
    RankContext,
    apply_emb,
    bottom_mlp,
    forward_bls,
    forward_local,
    interact_features,
    mlp_layer,
    top_mlp,
)
from app.services.errors import WorkloadError
from app.services.verify import run_model, small_model
from app.services.workloads import InferenceBatch, WorkloadKind, WorkloadSpec, generate, load_csv


@pytest.fixture
def config():
    return small_model(seed=3)


@pytest.fixture
def model(config):
    return DlrmModel(config)


def make_workload(config, kind, batch_size, num_batches=4, max_multiplicity=1, seed=0):
    spec = WorkloadSpec(
        kind=kind,
        batch_size=batch_size,
        num_batches=num_batches,
        num_dense=config.num_dense,
        table_rows=config.table_rows,
        max_multiplicity=max_multiplicity,
        seed=seed,
    )
    return generate(spec).batches


def scalar_layer(x, weight, bias):
    out = np.zeros((x.shape[0], weight.shape[1]), dtype=np.float32)
    for n in range(x.shape[0]):
        for o in range(weight.shape[1]):
            acc = np.float32(0)
            for i in range(weight.shape[0]):
                acc = np.float32(acc + np.float32(x[n, i] * weight[i, o]))
            out[n, o] = np.float32(acc + bias[o])
    return out


def test_config_checks_layer_shapes():
    with pytest.raises(ValidationError):
        ModelConfig(emb_dim=4, table_rows=[10], bottom_mlp_dims=[6, 5], top_mlp_dims=[1])
    with pytest.raises(ValidationError):
        ModelConfig(emb_dim=4, table_rows=[10], bottom_mlp_dims=[4], top_mlp_dims=[3])
    with pytest.raises(ValidationError):
        ModelConfig(emb_dim=4, table_rows=[], bottom_mlp_dims=[4], top_mlp_dims=[1])


def test_interaction_width(config):
    # 5 tables plus the dense vector give 6 * 5 / 2 dots.
    assert config.interaction_dim == 4 + 15


def test_apply_emb_single_index_is_the_row(model):
    batch = InferenceBatch(
        dense=np.zeros((2, 3), dtype=np.float32),
        lengths=[np.ones(2, dtype=np.int32)] * 5,
        indices=[np.array([3, 7])] * 5,
    )

    pooled = apply_emb(model, batch)

    assert len(pooled) == 5
    for t in range(5):
        np.testing.assert_array_equal(pooled[t], model.tables[t][[3, 7]])


def test_apply_emb_duplicate_index_doubles_the_row(model):
    batch = InferenceBatch(
        dense=np.zeros((1, 3), dtype=np.float32),
        lengths=[np.array([2], dtype=np.int32)],
        indices=[np.array([4, 4])],
    )

    (pooled,) = apply_emb(model, batch, [0])

    np.testing.assert_array_equal(pooled[0], 2 * model.tables[0][4])


def test_apply_emb_matches_scalar_loop(config, model):
    (batch,) = make_workload(config, WorkloadKind.HETERO, 16, num_batches=1, max_multiplicity=6)

    pooled = apply_emb(model, batch)

    for t in range(config.num_tables):
        for n in range(batch.batch_size):
            acc = np.zeros(config.emb_dim, dtype=np.float32)
            for i in batch.sample_indices(t, n):
                acc = acc + model.tables[t][i]
            np.testing.assert_array_equal(pooled[t][n], acc)


def test_apply_emb_rejects_out_of_range_index(model):
    batch = InferenceBatch(
        dense=np.zeros((1, 3), dtype=np.float32),
        lengths=[np.ones(1, dtype=np.int32)],
        indices=[np.array([50])],
    )
    with pytest.raises(WorkloadError, match="out of range"):
        apply_emb(model, batch, [0])


def test_bottom_mlp_zero_input_and_bias(model):
    model.bottom = [(w, np.zeros_like(b)) for w, b in model.bottom]

    out = bottom_mlp(model, np.zeros((3, 3), dtype=np.float32))

    np.testing.assert_array_equal(out, np.zeros((3, 4), dtype=np.float32))


def test_bottom_mlp_identity_layer(model):
    model.bottom = [(np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))]
    dense = np.random.default_rng(0).random((4, 3), dtype=np.float32)

    np.testing.assert_array_equal(bottom_mlp(model, dense), dense)


def test_bottom_mlp_matches_scalar_oracle(model):
    dense = np.random.default_rng(1).random((5, 3), dtype=np.float32)

    expected = dense
    for weight, bias in model.bottom:
        expected = np.maximum(scalar_layer(expected, weight, bias), np.float32(0))

    np.testing.assert_array_equal(bottom_mlp(model, dense), expected)


def test_mlp_layer_dimension_mismatch(model):
    weight, bias = model.bottom[0]
    with pytest.raises(ValueError):
        mlp_layer(np.zeros((2, 4), dtype=np.float32), weight, bias)


def test_top_mlp_zero_input_and_bias(config, model):
    model.top = [(w, np.zeros_like(b)) for w, b in model.top]

    prediction = top_mlp(model, np.zeros((2, config.interaction_dim), dtype=np.float32))

    np.testing.assert_array_equal(prediction.ctr, np.full(2, 0.5, dtype=np.float32))


def test_top_mlp_identity_layer(model):
    model.top = [(np.ones((1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32))]
    z = np.array([[0.0], [2.0]], dtype=np.float32)

    prediction = top_mlp(model, z)

    np.testing.assert_array_equal(prediction.ctr, (1.0 / (1.0 + np.exp(-z)))[:, 0])


def test_top_mlp_matches_scalar_oracle(config, model):
    z = np.random.default_rng(2).random((3, config.interaction_dim), dtype=np.float32)

    expected = z
    for n, (weight, bias) in enumerate(model.top):
        expected = scalar_layer(expected, weight, bias)
        if n < len(model.top) - 1:
            expected = np.maximum(expected, np.float32(0))
    expected = 1.0 / (1.0 + np.exp(-expected))

    prediction = top_mlp(model, z)

    np.testing.assert_array_equal(prediction.ctr, expected[:, 0])
    assert np.all((prediction.ctr >= 0) & (prediction.ctr <= 1))


def test_interact_zero_vectors():
    x = np.zeros((2, 3), dtype=np.float32)

    z = interact_features(x, [x, x])

    np.testing.assert_array_equal(z, np.zeros((2, 6), dtype=np.float32))


def test_interact_orthonormal_vectors():
    e1, e2, e3 = (np.eye(3, dtype=np.float32)[i : i + 1] for i in range(3))

    z = interact_features(e1, [e2, e3])

    np.testing.assert_array_equal(z[0], [1, 0, 0, 0, 0, 0])


def test_interact_matches_nested_loop_dots():
    rng = np.random.default_rng(4)
    x = rng.random((3, 4), dtype=np.float32)
    ly = [rng.random((3, 4), dtype=np.float32) for _ in range(3)]

    z = interact_features(x, ly)

    vectors = [x] + ly
    for n in range(3):
        dots = []
        for i in range(4):
            for j in range(i):
                acc = np.float32(0)
                for d in range(4):
                    acc = np.float32(acc + np.float32(vectors[i][n, d] * vectors[j][n, d]))
                dots.append(acc)
        np.testing.assert_array_equal(z[n], np.concatenate([x[n], np.array(dots, dtype=np.float32)]))


def test_interact_dimension_mismatch():
    with pytest.raises(ValueError):
        interact_features(np.zeros((2, 3)), [np.zeros((2, 4))])


def test_model_init_is_seeded(config):
    a, b = DlrmModel(config), DlrmModel(config)
    np.testing.assert_array_equal(a.tables[2], b.tables[2])
    np.testing.assert_array_equal(a.top[0][0], b.top[0][0])
    assert np.abs(a.tables[0]).max() <= 0.5 / config.emb_dim


@pytest.mark.asyncio
async def test_received_rows_pool_to_the_owner_lookups(config, model):
    (batch,) = make_workload(config, WorkloadKind.HETERO, 32, num_batches=1, max_multiplicity=4)
    comm = await create_comm(8)
    try:

        async def received(handle):
            ctx = await RankContext.create(handle, config, [batch])
            routed = ctx.routed[0]
            await ctx.bls.initiate(ctx.lookup(routed), routed.recv_lengths)
            return ctx.pooled(routed, await ctx.bls.wait())

        per_rank = await comm.run(received)
    finally:
        await comm.close()

    for rank, pooled in enumerate(per_rank):
        start, end = 4 * rank, 4 * rank + 4
        expected = apply_emb(model, batch.rows(start, end))
        for t in range(config.num_tables):
            np.testing.assert_array_equal(pooled[t], expected[t])


@pytest.mark.asyncio
async def test_bound_two_waits_per_batch(config, mocker):
    batches = make_workload(config, WorkloadKind.BALANCED, 4, num_batches=5)
    comm = await create_comm(1)
    try:
        ctx = await RankContext.create(comm.handle(0), config, batches, bound_k=2)
        bls = ctx.bls
        wait = bls.wait
        waited_in_body = []

        async def tracking_wait():
            waited_in_body.append(bls.iteration - 1)
            return await wait()

        mocker.patch.object(bls, "wait", side_effect=tracking_wait)
        predictions = await forward_bls(ctx, 2)
    finally:
        await comm.close()

    assert waited_in_body == [2, 3, 4, 4, 4]
    assert all(p is not None for p in predictions)


def golden_csv(path, config, samples):
    rng = np.random.default_rng(9)
    lines = []
    for _ in range(samples):
        label = int(rng.integers(0, 2))
        dense = [f"{v:.3f}" for v in rng.random(config.num_dense)]
        ids = [str(int(rng.integers(0, rows))) for rows in config.table_rows]
        lines.append(",".join([str(label)] + dense + ids))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.mark.asyncio
@pytest.mark.parametrize("ranks", [1, 2, 4, 8])
@pytest.mark.parametrize("kind", ["balanced", "hetero", "csv"])
async def test_bounded_lag_predictions_are_bit_identical(config, model, tmp_path, ranks, kind):
    # Arrange
    if kind == "csv":
        batches = load_csv(golden_csv(tmp_path / "golden.csv", config, 4 * ranks * 3), 4 * ranks, config.table_rows, 3)
    else:
        batches = make_workload(config, WorkloadKind(kind), 4 * ranks, max_multiplicity=5, seed=ranks)
    oracle = [forward_local(model, b).ctr for b in batches]

    # Act
    sync = await run_model(ranks, config, batches, None)

    # Assert
    for expected, got in zip(oracle, sync):
        np.testing.assert_array_equal(got, expected)
    for bound_k in (0, 1, 2, 4, 8):
        bounded = await run_model(ranks, config, batches, bound_k)
        for expected, got in zip(sync, bounded):
            np.testing.assert_array_equal(got, expected)
