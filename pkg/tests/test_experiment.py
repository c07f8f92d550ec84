import json

import numpy as np
import pytest
import yaml

from rlwdispatch.cli import main
from rlwdispatch.experiment import (
    ConfigError,
    cmd_abtest,
    cmd_compare,
    cmd_heatmap,
    cmd_run,
    cmd_sweep,
    merge_configs,
    parse_config,
    parse_seeds,
)
from rlwdispatch.policy import CITY_I_W_P, CITY_I_W_REW
from rlwdispatch.simulator import TripEventLog

TINY = {"preset": "tiny", "horizon": 120}


def test_parse_seeds_forms():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds(5) == [5]
    assert parse_seeds([2, 4]) == [2, 4]
    with pytest.raises(ConfigError):
        parse_seeds("3..1")


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"bogus": 1}, "bogus"),
        ({"preset": "atlantis"}, "preset"),
        ({"policy": "rlw", "params": {"gama": 0.9}}, "params.gama"),
        ({"policy": "rlw", "params": {"gamma": 1.5}}, "params"),
        ({"policy": "teleport"}, "policy"),
        ({"sim": {"warp": 2}}, "sim.warp"),
        ({"horizon": -5}, "horizon"),
        ({"price_scale": 0}, "price_scale"),
        ({"sweep": {"budget": 0}}, "sweep.budget"),
        ({"sweep": {"budget": 2}}, "sweep"),
        ({"policies": [{"policy": "myopic", "color": "red"}]}, "policies[0].color"),
    ],
)
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw)
    assert str(exc.value).startswith(field)


def test_run_writes_schema_valid_report(tmp_path):
    cfg = parse_config({**TINY, "horizon": 60, "out": str(tmp_path)})
    paths = cmd_run(cfg)
    for key in ("totals", "timeseries", "match_log", "values", "thresholds"):
        assert paths[key].exists()
    totals = json.loads(paths["totals"].read_text())
    assert {"requests", "completed", "income", "cr", "ar", "sr", "demand_hash"} <= set(totals)
    header = paths["timeseries"].read_text().splitlines()[0].split(",")
    assert header[:3] == ["t_start", "t_end", "arrivals"]


def test_run_twice_is_byte_identical(tmp_path):
    cfg = parse_config({**TINY, "horizon": 600})
    a = cmd_run(cfg, tmp_path / "a")
    b = cmd_run(cfg, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == (tmp_path / "b" / a[key].name).read_bytes()


def test_price_scale_doubles_generated_prices(tmp_path):
    for scale in (1.0, 2.0):
        assert main(["gen-log", "--seed", "3", "--horizon", "600", "--price-scale", str(scale),
                     "--out", str(tmp_path / f"log{scale}.jsonl")]) == 0
    one = TripEventLog.read_jsonl(tmp_path / "log1.0.jsonl").records
    two = TripEventLog.read_jsonl(tmp_path / "log2.0.jsonl").records
    p1 = [r["price"] for r in one if r["type"] == "order"]
    p2 = [r["price"] for r in two if r["type"] == "order"]
    assert p1 and p2 == [2 * p for p in p1]


def _two_policy_cfg(**extra):
    return parse_config({
        **TINY,
        "horizon": 600,
        "seeds": "0..2",
        "policies": [{"name": "base", "policy": "myopic"}, {"name": "rlw", "policy": "rlw"}],
        "baseline": "base",
        **extra,
    })


def test_compare_baseline_against_itself_is_exactly_zero():
    rep = cmd_compare(_two_policy_cfg())
    for metric, (mean, std) in rep.summary()["base"].items():
        assert mean == 0.0 and std == 0.0
    assert rep.table().splitlines()[1] == "base,0.00±0.00,0.00±0.00,0.00±0.00,0.00±0.00"


def test_compare_single_seed_has_zero_std():
    cfg = _two_policy_cfg(seeds=[4])
    for mean_std in cmd_compare(cfg).summary()["rlw"].values():
        assert mean_std[1] == 0.0


def test_compare_uses_matched_demand():
    rep = cmd_compare(_two_policy_cfg())
    for k in range(3):
        assert rep.totals["base"][k]["demand_hash"] == rep.totals["rlw"][k]["demand_hash"]
        assert rep.totals["base"][k]["requests"] == rep.totals["rlw"][k]["requests"]


def test_compare_rejects_mismatched_presets():
    a = parse_config({"preset": "tiny", "policy": "myopic", "name": "a"})
    b = parse_config({"preset": "city_i", "policy": "rlw", "name": "b"})
    with pytest.raises(ConfigError, match="preset"):
        merge_configs([a, b])


def test_compare_needs_two_policies():
    with pytest.raises(ConfigError):
        cmd_compare(parse_config(TINY))


def test_abtest_three_hour_flip_gives_eight_windows():
    cfg = parse_config({**TINY, "horizon": 86400, "policies": [{"name": "a", "policy": "myopic"},
                                                             {"name": "b", "policy": "v1d3"}]})
    rep = cmd_abtest(cfg, "a", "b", flip_hours=3)
    run0 = [w for w in rep.windows if w.run == 0]
    assert len(run0) == 8
    assert [w.arm for w in run0].count("control") == 4
    # window attribution partitions each run
    for run, totals in enumerate(rep.run_totals):
        ws = [w for w in rep.windows if w.run == run]
        assert sum(w.arrivals for w in ws) == totals["requests"]
        assert sum(w.completed for w in ws) == totals["completed"]
        assert sum(w.income for w in ws) == pytest.approx(totals["income"], rel=1e-12)


def test_aa_test_ratio_is_exactly_one():
    cfg = parse_config({**TINY, "horizon": 7200, "policy": "rlw"})
    rep = cmd_abtest(cfg, "rlw", "rlw", flip_hours=0.5)
    assert all(r == 1.0 for r in rep.ratios().values())


def test_abtest_rejects_nonpositive_flip():
    cfg = parse_config({**TINY, "policy": "myopic"})
    with pytest.raises(ConfigError):
        cmd_abtest(cfg, "myopic", "myopic", flip_hours=0)


def _sweep_cfg(**sweep):
    return parse_config({**TINY, "horizon": 300, "policy": "rlw", "sweep": sweep})


def test_sweep_budget_one_returns_that_point():
    res = cmd_sweep(_sweep_cfg(budget=1, seed=3, ranges={"w_rew_s": [0, 1], "w_p_s": [0, 1]}))
    assert len(res.points) == 1
    assert res.best_index == 0


def test_sweep_grid_contains_city_i_point(tmp_path):
    city = [*CITY_I_W_REW, *CITY_I_W_P]
    cfg = _sweep_cfg(budget=3, seed=0, grid=[[0.9, 0.9, 0.0, 0.0], city], ranges={"w_rew_s": [0, 1]})
    res = cmd_sweep(cfg)
    assert tuple(city) in res.points
    paths = res.write(tmp_path)
    assert "0.43,0.008,0.002,0.004" in paths["trace"].read_text()


def test_sweep_ties_pick_lowest_index():
    # two identical grid points tie by construction
    cfg = _sweep_cfg(budget=2, grid=[[0.5, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]])
    res = cmd_sweep(cfg)
    assert res.objectives[0] == res.objectives[1]
    assert res.best_index == 0


def test_sweep_is_deterministic():
    cfg = _sweep_cfg(budget=3, seed=9, ranges={"w_p_f": [0, 0.5]})
    assert cmd_sweep(cfg).points == cmd_sweep(cfg).points


def test_heatmap_exports(tmp_path):
    cfg = parse_config({**TINY, "horizon": 1800, "sim": {"snapshot_interval": 600}})
    cmd_run(cfg, tmp_path)
    at0 = cmd_heatmap(tmp_path, 0.0)
    assert len(at0) == 9
    assert all(v == 0.0 for _, _, v in at0)
    assert cmd_heatmap(tmp_path, 1190.0) == cmd_heatmap(tmp_path, 1190.0)
    assert [(r, c) for r, c, _ in at0] == [(r, c) for r in range(3) for c in range(3)]
    with pytest.raises(ValueError):
        cmd_heatmap(tmp_path, 1e6)


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"preset": "tiny", "unknown_key": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["heatmap", str(tmp_path / "nothing"), "--t", "0"]) == 3
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump({**TINY, "horizon": 60, "policy": "myopic"}))
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "totals.json").exists()


def test_cli_compare_from_two_files(tmp_path):
    a = tmp_path / "a.yaml"
    b = tmp_path / "b.yaml"
    a.write_text(yaml.safe_dump({**TINY, "name": "myo", "policy": "myopic", "baseline": "myo"}))
    b.write_text(yaml.safe_dump({**TINY, "name": "rl", "policy": "rlw"}))
    assert main(["compare", "--config", str(a), "--config", str(b), "--seeds", "0..1",
                 "--out", str(tmp_path / "cmp")]) == 0
    text = (tmp_path / "cmp" / "improvement.csv").read_text()
    assert text.splitlines()[1].startswith("myo,0.00±0.00")
    c = tmp_path / "c.yaml"
    c.write_text(yaml.safe_dump({"preset": "city_i", "name": "x", "policy": "myopic"}))
    assert main(["compare", "--config", str(a), "--config", str(c)]) == 2
