import json
import subprocess
import sys

import numpy as np
import pytest

from wsre_meld.cli import main

SMALL = """\
budget:
  naive_draws: 500
  stage1_iterations: 600
  stage1_warmup: 100
  stage2_iterations: 300
  stage2_warmup: 100
  direct_iterations: 600
  direct_warmup: 100
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return str(p)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsage:
    def test_missing_model(self, tmp_path, capsys):
        code, _, err = run(["wsre", "--out", str(tmp_path / "o")], capsys)
        assert code == 2
        assert "model is required" in err

    def test_unknown_command(self, capsys):
        assert run(["frobnicate"], capsys)[0] == 2

    def test_analytic_hiv_rejected(self, tmp_path, capsys):
        code, _, err = run(["meld", "--model", "hiv", "--evaluator", "analytic", "--out", str(tmp_path)], capsys)
        assert code == 2
        assert "no analytic" in err

    def test_direct_h1n1_rejected(self, tmp_path, capsys):
        code, _, err = run(["direct", "--model", "h1n1", "--out", str(tmp_path)], capsys)
        assert code == 2
        assert "no implied joint" in err

    def test_bad_budget_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("budget:\n  nonsense: 3\n")
        code, _, err = run(["meld", "--model", "gaussian", "--config", str(cfg), "--out", str(tmp_path / "o")],
                           capsys)
        assert code == 2 and "unknown budget key" in err

    def test_bad_yaml(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("model: [unclosed\n")
        assert run(["wsre", "--config", str(cfg)], capsys)[0] == 2

    def test_non_square_h1n1_grid(self, tmp_path, capsys):
        code, _, err = run(["wsre", "--model", "h1n1", "--w", "10", "--out", str(tmp_path)], capsys)
        assert code == 2 and "perfect square" in err

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "wsre_meld", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and "wsre-meld" in r.stdout


class TestWsre:
    def test_hiv_paper_budget(self, tmp_path, capsys):
        out = tmp_path / "w"
        code, msg, _ = run(["wsre", "--model", "hiv", "--w", "10", "--n-per-w", "250", "--seed", "1",
                            "--out", str(out)], capsys)
        assert code == 0 and "2500" in msg
        doc = json.loads((out / "estimates" / "wsre.json").read_text())
        assert doc["format"] == "wsre-estimate"
        assert sum(len(c["draws"]) for c in doc["components"]) == 2500
        meta = json.loads((out / "meta.json").read_text())
        assert meta["total_draws"] == 2500 and meta["resolved"]["model"] == "hiv"

    def test_byte_identical_rerun(self, tmp_path, capsys):
        paths = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert run(["wsre", "--model", "gaussian", "--w", "3", "--n-per-w", "50", "--seed", "4",
                        "--out", str(out)], capsys)[0] == 0
            paths.append(out / "estimates" / "wsre.json")
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_config_values_and_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("model: gaussian\nw: 2\nn_per_w: 20\nseed: 3\n")
        out = tmp_path / "o"
        assert run(["wsre", "--config", str(cfg), "--n-per-w", "30", "--out", str(out)], capsys)[0] == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["resolved"]["n_per_w"] == 30 and meta["resolved"]["w"] == 2
        assert meta["config_file"] == {"model": "gaussian", "w": 2, "n_per_w": 20, "seed": 3}
        assert meta["total_draws"] == 60

    def test_output_root_from_environment(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("WSRE_MELD_OUTPUT", str(tmp_path / "root"))
        assert run(["wsre", "--model", "gaussian", "--w", "2", "--n-per-w", "20"], capsys)[0] == 0
        assert (tmp_path / "root" / "wsre-gaussian-seed0" / "estimates" / "wsre.json").exists()


class TestMeld:
    def test_hiv_wsre_single_replicate(self, tmp_path, small_cfg, capsys):
        out = tmp_path / "m"
        code, _, _ = run(["meld", "--model", "hiv", "--evaluator", "wsre", "--replicates", "1", "--seed", "7",
                          "--config", small_cfg, "--out", str(out)], capsys)
        assert code == 0
        for sub in ("chains", "estimates", "reports"):
            assert (out / sub).is_dir()
        s1 = (out / "chains" / "stage_one.csv").read_text().splitlines()
        s2 = (out / "chains" / "stage_two.csv").read_text().splitlines()
        assert s1[0].startswith("iteration,rho1")
        assert s2[0] == "iteration,pi12,index" and len(s2) == 301
        meta = json.loads((out / "meta.json").read_text())
        assert meta["runs"][0]["indices_ok"] is True

    def test_replicates_and_estimate_reuse(self, tmp_path, small_cfg, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["meld", "--model", "gaussian", "--replicates", "3", "--seed", "2", "--config", small_cfg,
                    "--out", str(a)], capsys)[0] == 0
        assert sorted(p.name for p in (a / "chains").glob("stage_two_r*.csv")) == \
            ["stage_two_r01.csv", "stage_two_r02.csv", "stage_two_r03.csv"]
        assert run(["meld", "--model", "gaussian", "--replicates", "3", "--seed", "2", "--config", small_cfg,
                    "--estimate", str(a / "estimates" / "wsre.json"), "--out", str(b)], capsys)[0] == 0
        for name in ("stage_one.csv", "stage_two_r02.csv"):
            assert (a / "chains" / name).read_bytes() == (b / "chains" / name).read_bytes()

    def test_estimate_needs_wsre(self, tmp_path, capsys):
        code, _, err = run(["meld", "--model", "gaussian", "--evaluator", "naive", "--estimate", "x.json",
                            "--out", str(tmp_path)], capsys)
        assert code == 2 and "wsre" in err

    def test_gaussian_analytic(self, tmp_path, small_cfg, capsys):
        out = tmp_path / "g"
        assert run(["meld", "--model", "gaussian", "--evaluator", "analytic", "--replicates", "1",
                    "--config", small_cfg, "--out", str(out)], capsys)[0] == 0
        assert (out / "chains" / "stage_two.csv").exists()
        assert not (out / "estimates" / "wsre.json").exists()


class TestDirect:
    def test_gaussian(self, tmp_path, small_cfg, capsys):
        out = tmp_path / "d"
        assert run(["direct", "--model", "gaussian", "--config", small_cfg, "--seed", "1", "--out", str(out)],
                   capsys)[0] == 0
        lines = (out / "chains" / "direct.csv").read_text().splitlines()
        assert lines[0] == "iteration,phi,gamma" and len(lines) == 601


class TestDiagnose:
    @pytest.fixture
    def chains(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = []
        for k in range(2):
            p = tmp_path / f"c{k}.csv"
            x = rng.standard_normal(400) + k
            p.write_text("iteration,phi\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(x)))
            paths.append(p)
        return paths

    def test_single_chain(self, tmp_path, chains, capsys):
        out = tmp_path / "r"
        assert run(["diagnose", str(chains[0]), "--out", str(out)], capsys)[0] == 0
        doc = json.loads((out / "reports" / "diagnostics.json").read_text())
        assert set(doc) == {"c0"}
        assert doc["c0"]["stuck"]["longest"] == 1 and doc["c0"]["ess"]["n"] == 400
        assert not (out / "reports" / "qq.csv").exists()

    def test_two_chain_qq(self, tmp_path, chains, capsys):
        out = tmp_path / "r"
        assert run(["diagnose", str(chains[0]), str(chains[1]), "--out", str(out)], capsys)[0] == 0
        qq = (out / "reports" / "qq.csv").read_text().splitlines()
        assert qq[0] == "prob,region,c0,c1,gap"
        doc = json.loads((out / "reports" / "diagnostics.json").read_text())
        assert doc["qq"]["mean_gap"] == pytest.approx(1.0, abs=0.25)

    def test_replicate_directories(self, tmp_path, capsys):
        # 20 draws per chain, so a terminal run counts once it reaches 2 draws
        steps = list(range(1, 16))
        runs_by = {"naive": [[0] * 6 + steps[:14], steps[:16] + [99] * 4],
                   "wsre": [list(range(20)), [0] * 2 + steps + [20, 21, 22]]}
        for name, runs in runs_by.items():
            d = tmp_path / name
            d.mkdir()
            for k, xs in enumerate(runs):
                (d / f"stage_two_r{k + 1:02d}.csv").write_text(
                    "iteration,phi1,phi2,index\n" + "".join(f"{i},{v},0,{v}\n" for i, v in enumerate(xs)))
        out = tmp_path / "r"
        assert run(["diagnose", "--replicates-dir", str(tmp_path / "naive"), "--compare-dir",
                    str(tmp_path / "wsre"), "--out", str(out)], capsys)[0] == 0
        agg = json.loads((out / "reports" / "diagnostics.json").read_text())["stuck_comparison"]
        naive = agg[f"replicates:{tmp_path / 'naive'}"]
        wsre = agg[f"compare:{tmp_path / 'wsre'}"]
        assert naive["median_longest"] == 5.0 and wsre["median_longest"] == 1.5
        assert naive["terminal_stuck"] == 1 and wsre["terminal_stuck"] == 0
        assert "median_longest" in (out / "reports" / "diagnostics.csv").read_text()

    def test_malformed_csv_line_number(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("iteration,phi\n0,1.0\n1,oops\n")
        code, _, err = run(["diagnose", str(p), "--out", str(tmp_path / "r")], capsys)
        assert code == 1 and "bad.csv:3:" in err

    def test_unknown_column(self, tmp_path, chains, capsys):
        code, _, err = run(["diagnose", str(chains[0]), "--column", "zeta", "--out", str(tmp_path / "r")], capsys)
        assert code == 2 and "zeta" in err

    def test_nothing_to_do(self, tmp_path, capsys):
        assert run(["diagnose", "--out", str(tmp_path)], capsys)[0] == 2
