import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest
from hypothesis import given, settings, strategies as st

from qnetcfa.cli import (
    CSV_FIELDS,
    ConfigError,
    ExperimentConfig,
    classify,
    dump_circuit,
    emit_scaling_report,
    load_schema,
    loglog_slope,
    main,
    parse_config,
    read_records,
    records_to_csv,
    run_experiment,
    serialize_config,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_minimal_config_gets_defaults():
    cfg = parse_config('{"protocol": "swap_chain", "size": 4}')
    assert (cfg.F_gen, cfg.f_gate, cfg.Tdp_s, cfg.loss_p, cfg.channel_latency_s) == (1.0, 1.0, 0.01, 0.0, 1e-3)
    assert (cfg.trials, cfg.strategy, cfg.backend, cfg.sizes) == (10_000, "chain", "cfa", (4,))


@pytest.mark.parametrize("text,field", [
    ('{"protocol": "swap_chain", "size": 4, "loss_p": 1.5}', "loss_p"),
    ('{"protocol": "swap_chain", "size": 2}', "size"),
    ('{"protocol": "swap_chain", "size": 4, "F_gen": 0}', "F_gen"),
    ('{"protocol": "swap_chain", "size": 4, "trials": 0}', "trials"),
    ('{"protocol": "distill_single", "size": 2}', "size"),
    ('{"protocol": "swap_chain", "size": 4, "seed": -1}', "seed"),
])
def test_range_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(text)


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as e:
        parse_config('{"protocol": "swap_chain", "size": 4, "colour": 1}')
    assert "colour" in str(e.value) and "F_gen" in str(e.value)


def test_other_config_errors():
    for text in ("[1]", "not json", '{"size": 3}', '{"protocol": "swap_chain", "size": 4, "backend": "gpu"}',
                 '{"protocol": "swap_chain", "size": 4, "strategy": "zigzag"}',
                 '{"protocol": "swap_chain", "size": 4, "sweep": []}'):
        with pytest.raises(ConfigError):
            parse_config(text)


configs = st.builds(
    dict,
    protocol=st.sampled_from(["swap_chain", "distill_nested", "teleport"]),
    size=st.integers(3, 8),
    F_gen=st.floats(0.01, 1.0),
    f_gate=st.floats(0.0, 1.0),
    Tdp_s=st.floats(1e-4, 10.0),
    loss_p=st.floats(0.0, 0.99),
    trials=st.integers(1, 10**6),
    seed=st.integers(0, 2**64 - 1),
    strategy=st.sampled_from(["chain", "fanin", "truthtable"]),
    sweep=st.one_of(st.none(), st.lists(st.integers(3, 8), min_size=1, max_size=4)),
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_config_round_trip_and_schema_agree(data):
    cfg = parse_config(json.dumps(data))
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    jsonschema.validate(json.loads(serialize_config(cfg)), load_schema())


def test_schema_rejects_what_the_parser_rejects():
    schema = load_schema()
    for doc in ({"protocol": "swap_chain", "size": 4, "loss_p": 1.5},
                {"protocol": "swap_chain", "size": 4, "colour": 1},
                {"size": 4}):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(doc, schema)
    assert set(schema["properties"]) == set(ExperimentConfig.__dataclass_fields__)


def test_csv_header_golden():
    assert records_to_csv([]) == (FIXTURES / "csv_header.txt").read_text()
    assert CSV_FIELDS[-2:] == ("rng_algorithm", "schema_version")


def test_dump_circuit_golden():
    assert dump_circuit("swap_chain", 5, "chain") == (FIXTURES / "swap_chain_5_chain.txt").read_text()
    assert "TOFFOLI" in dump_circuit("distill_nested", 2, "chain")
    with pytest.raises(ConfigError):
        dump_circuit("swap_chain", 2, "chain")


def test_sweep_matches_oracle_fixtures(tmp_path):
    frozen = json.loads((FIXTURES / "oracle_values.json").read_text())["swap_chain"]
    p = frozen["params"]
    cfg = ExperimentConfig("swap_chain", 3, F_gen=p["F_gen"], f_gate=p["f_gate"], Tdp_s=p["Tdp_s"],
                           channel_latency_s=p["latency_s"], sweep=(3, 4, 5, 6),
                           output_path=str(tmp_path / "out.csv"), jsonl=True)
    records = run_experiment(cfg)
    for r, point in zip(records, frozen["points"]):
        assert r.size == point["size"]
        assert r.fidelity == pytest.approx(point["fidelity"], abs=1e-9)
    assert read_records((tmp_path / "out.csv").read_text()) == records
    assert len((tmp_path / "out.jsonl").read_text().splitlines()) == 4


def test_nested_distillation_sweep_improves():
    cfg = ExperimentConfig("distill_nested", 1, F_gen=0.8, Tdp_s=1.0, sweep=(1, 2, 3))
    fids = [r.fidelity for r in run_experiment(cfg)]
    assert fids[0] < fids[1] < fids[2]


def test_same_config_and_seed_give_identical_csv(tmp_path):
    cfg_text = json.dumps({"protocol": "distill_nested", "size": 1, "backend": "mc", "trials": 200, "seed": 9,
                           "F_gen": 0.8, "record_wallclock": False})
    path = tmp_path / "c.json"
    path.write_text(cfg_text)
    outs = []
    for i, workers in enumerate((1, 2)):
        out = tmp_path / f"r{i}.csv"
        assert main(["run", str(path), "--out", str(out), "--workers", str(workers)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert b"\r" not in outs[0]


def test_scaling_report(tmp_path):
    cfg = ExperimentConfig("swap_chain", 4, sweep=(4, 6, 8), strategy="fanin")
    records = run_experiment(cfg) + run_experiment(cfg.replace(strategy="chain"))
    text = emit_scaling_report(records, tmp_path)
    assert "swap_chain_cfa_fanin" in text and "swap_chain_cfa_chain" in text
    amps = [int(line.split()[1]) for line in (tmp_path / "swap_chain_cfa_fanin_amplitudes.dat").read_text().splitlines()]
    assert amps == sorted(amps) and len(set(amps)) == 3
    assert (tmp_path / "swap_chain_cfa_chain_wallclock.dat").exists()
    with pytest.raises(ConfigError):
        emit_scaling_report(records[:2], tmp_path)


def test_slope_classification():
    assert loglog_slope([1, 2, 4], [3, 3, 3]) == pytest.approx(0.0, abs=1e-12)
    assert loglog_slope([1, 2, 4], [1, 4, 16]) == pytest.approx(2.0)
    assert classify(0.0) == "linear" and classify(1.5) == "linear" and classify(1.6) == "super-linear"


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"protocol": "swap_chain", "size": 4, "loss_p": 1.5}')
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(tmp_path / "missing.json")]) == 1
    assert main(["frobnicate"]) == 1
    # the oracle refuses a chain this long at run time
    big = tmp_path / "big.json"
    big.write_text('{"protocol": "swap_chain", "size": 12, "backend": "oracle"}')
    assert main(["run", str(big)]) == 2
    ok = tmp_path / "ok.json"
    ok.write_text('{"protocol": "swap_chain", "size": 3, "record_wallclock": false}')
    capsys.readouterr()
    assert main(["run", str(ok)]) == 0
    assert capsys.readouterr().out.startswith("protocol,size,")
    assert main(["dump-circuit", "swap_chain", "5", "chain"]) == 0


def test_report_command(tmp_path, capsys):
    cfg = ExperimentConfig("swap_chain", 3, sweep=(3, 4, 5), output_path=str(tmp_path / "s.csv"))
    run_experiment(cfg)
    assert main(["report", str(tmp_path / "s.csv"), "--outdir", str(tmp_path)]) == 0
    assert "linear" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "qnetcfa", "dump-circuit", "swap_chain", "5", "fanin"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.count("CNOT") == 6
