import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fespit import config as cfgmod
from fespit.cli import main
from fespit.data import read_manifest
from fespit.errors import ConfigError, FespitError
from fespit.experiment import run_experiment, sweep
from fespit.split import load_checkpoint

SMALL = """
data.n = 600
data.classes = 4
round.rounds = 4
round.clients = 4
round.sample_ratio = 0.5
round.local_steps = 2
round.batch_size = 16
round.fedround = 2
pretrain.epochs = 2
"""


def _write(tmp_path, text=SMALL, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- config ---------------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    cfg = cfgmod.load_config(_write(tmp_path, ""))
    r = cfg.round
    assert (r.rounds, r.clients, r.local_steps, r.batch_size, r.fedround) == (500, 100, 5, 128, 20)
    assert (r.zo.epsilon, r.client_lr, r.server_lr) == (1e-4, 2e-4, 1e-6)
    assert cfg.partition.clients == 100 and cfg.model.classes == cfg.data.classes


def test_comments_and_whitespace(tmp_path):
    cfg = cfgmod.loads("# note\n round.rounds=7   # trailing\n\n")
    assert cfg.round.rounds == 7


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match=r"unknown key 'round.epochs'.*round\.local_steps"):
        cfgmod.loads("round.epochs = 3")


def test_bad_value_names_field():
    with pytest.raises(ConfigError, match="round.rounds"):
        cfgmod.loads("round.rounds = many")
    with pytest.raises(ConfigError, match="^round:"):
        cfgmod.loads("round.local_steps = 0")


def test_zero_sampling_ratio_rejected():
    with pytest.raises(ConfigError, match="sample_ratio"):
        cfgmod.loads("round.sample_ratio = 0")


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError, match="duplicate"):
        cfgmod.loads("round.rounds = 1\nround.rounds = 2")
    with pytest.raises(ConfigError, match="key = value"):
        cfgmod.loads("round.rounds 2")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "nope.cfg")


@given(
    rounds=st.integers(0, 1000),
    clients=st.integers(10, 200),
    ratio=st.floats(0.1, 1.0),
    eps=st.floats(1e-8, 0.99),
    option=st.sampled_from(["PIT", "PTZO"]),
    kind=st.sampled_from(["iid", "dirichlet", "pathological"]),
    alpha=st.floats(1e-3, 1e3),
    enabled=st.booleans(),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=100, deadline=None)
def test_round_trip(rounds, clients, ratio, eps, option, kind, alpha, enabled, seed):
    cfg = cfgmod.with_overrides(cfgmod.ExperimentConfig(), **{
        "round.rounds": rounds, "round.clients": clients, "round.sample_ratio": ratio,
        "zo.epsilon": eps, "round.option": option, "partition.kind": kind,
        "partition.alpha": alpha, "pretrain.enabled": enabled, "run.seed": seed,
    })
    again = cfgmod.loads(cfgmod.dumps(cfg))
    assert again == cfg
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg)


def test_hash_ignores_output_directory():
    a = cfgmod.with_overrides(cfgmod.ExperimentConfig(), **{"run.out": "x"})
    b = cfgmod.with_overrides(cfgmod.ExperimentConfig(), **{"run.out": "y"})
    c = cfgmod.with_overrides(cfgmod.ExperimentConfig(), **{"run.seed": 1})
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b) != cfgmod.config_hash(c)


# -- runs -------------------------------------------------------------------------------

def test_run_writes_headed_files(tmp_path):
    cfg = cfgmod.loads(SMALL)
    res = run_experiment(cfg, tmp_path / "out")
    header = cfgmod.header_line(cfg)
    for name in ["config.txt", "partition.txt", "metrics.csv", "transcript.csv",
                 "transcript_summary.csv", "timing.csv"]:
        text = (tmp_path / "out" / name).read_text()
        assert header in text.splitlines()[:2], name
    metrics = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 2 + cfg.round.rounds
    _, shards = read_manifest(tmp_path / "out" / "partition.txt")
    assert all(np.array_equal(a.train, b.train) for a, b in zip(shards, res.shards))
    ck = load_checkpoint(tmp_path / "out" / "checkpoint.txt")
    assert any(k.startswith("server.") for k in ck) and any(k.startswith("client3.") for k in ck)


def test_rerun_is_byte_identical(tmp_path):
    cfg = cfgmod.loads(SMALL + "round.option = PTZO\nprobe.every = 2\n")
    run_experiment(cfg, tmp_path / "a")
    first = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir() if p.name != "timing.csv"}
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name, content in first.items():
        assert (tmp_path / "a" / name).read_bytes() == content, name
        assert (tmp_path / "b" / name).read_bytes() == content, name


def test_partition_file_is_write_once(tmp_path):
    run_experiment(cfgmod.loads(SMALL), tmp_path)
    other = cfgmod.loads(SMALL + "run.seed = 3\n")
    with pytest.raises(FespitError, match="fresh output directory"):
        run_experiment(other, tmp_path)


def test_probe_cadence_rows(tmp_path):
    cfg = cfgmod.loads(SMALL.replace("round.rounds = 4", "round.rounds = 20") + "probe.every = 10\n")
    run_experiment(cfg, tmp_path)
    rows = (tmp_path / "probes.csv").read_text().splitlines()[2:]
    assert [r.split(",")[0] for r in rows] == ["9", "19"]


def test_option_dispatch_visible_in_transcript(tmp_path):
    for option in ("PIT", "PTZO"):
        cfg = cfgmod.loads(SMALL + f"round.option = {option}\n")
        res = run_experiment(cfg, tmp_path / option)
        assert ("zo_loss" in res.transcript.kinds()) == (option == "PTZO")


def test_fedavg_algorithm(tmp_path):
    res = run_experiment(cfgmod.loads(SMALL + "run.algorithm = fedavg\n"), tmp_path)
    assert res.transcript.kinds() == ["model"]


def test_sweep_namespaces_outputs(tmp_path):
    cfg = cfgmod.loads(SMALL)
    results = sweep(cfg, "fedround", [1, 2, 4], tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["fedround=1", "fedround=2", "fedround=4"]
    agg_bytes = {v: sum(m.bytes_up for m in r.metrics) for v, r in results.items()}
    assert agg_bytes[1] > agg_bytes[2] > agg_bytes[4]
    with pytest.raises(ConfigError):
        sweep(cfg, "depth", [1], tmp_path)


def test_sweep_alpha_switches_to_dirichlet(tmp_path):
    cfg = cfgmod.loads(SMALL + "partition.kind = iid\n")
    results = sweep(cfg, "alpha", ["0.1"], tmp_path)
    assert "kind=dirichlet alpha=0.1" in (tmp_path / "alpha=0.1" / "partition.txt").read_text()
    assert len(results) == 1


# -- CLI ---------------------------------------------------------------------------------

def test_cli_run_and_exit_codes(tmp_path, capsys):
    path = _write(tmp_path)
    assert main(["run", str(path), "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert (tmp_path / "r" / "metrics.csv").exists()
    bad = _write(tmp_path, "round.bogus = 1", "bad.cfg")
    assert main(["run", str(bad), "--quiet"]) == 1
    assert "unknown key" in capsys.readouterr().err
    # an existing partition file from a different seed is a runtime failure
    assert main(["run", str(path), "--out", str(tmp_path / "r"), "--seed", "9", "--quiet"]) == 2


def test_cli_usage_error_is_config_error():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 1


def test_cli_seed_override(tmp_path):
    path = _write(tmp_path)
    main(["run", str(path), "--out", str(tmp_path / "s1"), "--seed", "1", "--quiet"])
    main(["run", str(path), "--out", str(tmp_path / "s2"), "--seed", "2", "--quiet"])
    assert "seed=1" in (tmp_path / "s1" / "metrics.csv").read_text().splitlines()[0]
    assert ((tmp_path / "s1" / "metrics.csv").read_text()
            != (tmp_path / "s2" / "metrics.csv").read_text())


def test_cli_sweep_and_probe(tmp_path, capsys):
    path = _write(tmp_path)
    assert main(["sweep", str(path), "--axis", "option", "--values", "PIT,PTZO",
                 "--out", str(tmp_path / "sw")]) == 0
    out = capsys.readouterr().out
    assert "option=PIT" in out and "option=PTZO" in out
    assert main(["probe", str(path), "--out", str(tmp_path / "pr")]) == 0
    rows = (tmp_path / "pr" / "probe.csv").read_text().splitlines()
    assert rows[1].startswith("client,") and len(rows) == 2 + 4


def test_cli_check(capsys):
    assert main(["check"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_sweep_alpha_orders_sigma_g(tmp_path):
    cfg = cfgmod.loads(SMALL.replace("round.rounds = 4", "round.rounds = 1") + "probe.every = 1\n")
    results = sweep(cfg, "alpha", [0.1, 0.3, 100.0], tmp_path)
    sg = {a: r.probes[0].sigma_g2_mean for a, r in results.items()}
    assert sg[0.1] > sg[0.3] > sg[100.0]
