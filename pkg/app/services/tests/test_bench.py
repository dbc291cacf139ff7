import pytest

from app.main import EXIT_CONFIG, EXIT_FAILED, EXIT_HAZARD, EXIT_OK, EXIT_TIMEOUT, main
from app.services.bench import A2AConfig, DlrmConfig, LoopMode, merge_a2a, shift_endpoints
from app.services.errors import CommTimeoutError, HazardError
from app.services.metrics import A2APoint, read_a2a_csv, read_metrics_csv, read_summary_csv, read_trace_csv
from app.services.verify import PropertyResult

SMALL_DLRM = [
    "--ranks", "2",
    "--batches", "4",
    "--batch-size", "8",
    "--emb-dim", "4",
    "--table-rows", "20,30,40",
    "--bottom-mlp", "6",
    "--top-mlp", "5",
    "--runs", "2",
]  # fmt: skip


def test_dlrm_points_put_sync_first():
    config = DlrmConfig(modes=[LoopMode.BLS], bounds=[0, 2], reference=True)

    assert config.points() == [(LoopMode.SYNC, 0), (LoopMode.BLS, 0), (LoopMode.BLS, 2)]
    assert config.model_config().bottom_mlp_dims == [512, 256, 64]
    assert config.num_tables == 26


def test_workload_spec_only_uses_the_knobs_of_its_kind():
    config = DlrmConfig(table_rows=[10, 20], max_mult=7, delay_max=0.5)

    spec = config.workload_spec(4)

    assert spec.max_multiplicity == 1
    assert spec.delay_max_s == 0
    assert spec.comm_size == 4


def test_a2a_config_caps_sizes():
    with pytest.raises(ValueError):
        A2AConfig(sizes=[32 * 1024 * 1024])


def test_shift_endpoints_moves_every_port():
    assert shift_endpoints(["10.0.0.1:9000", "10.0.0.2:9001"], 4) == ["10.0.0.1:9004", "10.0.0.2:9005"]


def test_merge_a2a_keeps_slowest_rank():
    fast = A2APoint("size", "bls", 2, 0, 64, 10, 0.1, 0.01)
    slow = A2APoint("size", "bls", 2, 0, 64, 10, 0.3, 0.03)

    assert merge_a2a([[fast], [slow]]) == [slow]


def test_dlrm_command_writes_results(tmp_path):
    # Act
    code = main(
        ["dlrm", *SMALL_DLRM, "--workload", "hetero", "--max-mult", "3",
         "--mode", "sync,bls", "--bound", "0,1,2", "--out", str(tmp_path)]
    )  # fmt: skip

    # Assert
    assert code == EXIT_OK
    rows = read_summary_csv(tmp_path / "summary.csv")
    assert [(r.backend_mode, r.bound_k) for r in rows] == [
        ("in_process/sync", 0),
        ("in_process/bls-acked", 0),
        ("in_process/bls-acked", 1),
        ("in_process/bls-acked", 2),
    ]
    assert all(r.max_lag <= r.bound_k + 1 for r in rows)
    assert all(r.latency_mean > 0 and r.throughput_mean > 0 for r in rows)

    point = tmp_path / "hetero-bls-k2"
    assert len(read_metrics_csv(point / "dlrm_metrics.csv")) == 2 * 2 * 4
    assert {e.rank for e in read_trace_csv(point / "lag_trace.csv")} == {0, 1}
    assert (tmp_path / "dlrm_latency.svg").exists()
    assert (tmp_path / "dlrm_throughput.svg").exists()


def test_summary_is_appended_across_invocations(tmp_path):
    args = ["dlrm", *SMALL_DLRM, "--runs", "1", "--out", str(tmp_path)]

    assert main(args) == EXIT_OK
    assert main([*args, "--mode", "sync"]) == EXIT_OK

    rows = read_summary_csv(tmp_path / "summary.csv")
    assert [(r.backend_mode, r.bound_k) for r in rows] == [
        ("in_process/bls-acked", 0),
        ("in_process/sync", 0),
    ]


def test_a2a_command_writes_sweeps(tmp_path):
    code = main(
        ["a2a", "--ranks", "2", "--bound", "0,1", "--sizes", "1,64", "--iters", "1,3",
         "--fixed-size", "64", "--fixed-iters", "2", "--out", str(tmp_path)]
    )  # fmt: skip

    assert code == EXIT_OK
    points = read_a2a_csv(tmp_path / "a2a.csv")
    assert len(points) == 2 * 4 + 4
    assert {(p.mode, p.bound_k) for p in points} == {("bls", 0), ("bls", 1), ("ref", 0)}
    assert all(p.total_s > 0 for p in points)
    assert (tmp_path / "a2a_size.svg").exists()
    assert (tmp_path / "a2a_iters.svg").exists()


def test_verify_command_passes(mocker):
    mocker.patch(
        "app.main.run_verify",
        return_value=[PropertyResult("lag bound", True), PropertyResult("acked safety", True)],
    )
    assert main(["verify", "--ranks", "2", "--seeds", "0"]) == EXIT_OK


def test_verify_command_fails_on_any_property(mocker):
    mocker.patch(
        "app.main.run_verify",
        return_value=[PropertyResult("lag bound", True), PropertyResult("acked safety", False, "seed 3")],
    )
    assert main(["verify"]) == EXIT_FAILED


@pytest.mark.parametrize(
    "argv",
    [
        ["dlrm", "--batch-size", "0"],
        ["dlrm", "--bound", "-1"],
        ["dlrm", "--workload", "csv"],
        ["a2a", "--sizes", "32M"],
        ["a2a", "--backend", "tcp", "--ranks", "2"],
    ],
)
def test_invalid_configuration_exits_with_config_code(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_CONFIG


@pytest.mark.parametrize(
    "error, expected",
    [
        (HazardError(1, 0, 4, 5), EXIT_HAZARD),
        (CommTimeoutError(2, 1, 3), EXIT_TIMEOUT),
    ],
)
def test_collective_failures_map_to_exit_codes(mocker, error, expected):
    mocker.patch("app.main.run_verify", side_effect=error)

    assert main(["verify"]) == expected
