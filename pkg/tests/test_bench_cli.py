import csv
import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from sapphire import bench_cli
from sapphire.bench_cli import DIVERGED_MARK, TRACE_HEADER, main, relative_errors


def synthetic_problem(name="lasso", n=200, p=20, task="lasso", **extra):
    loss = {"kind": "squared"} if task == "lasso" else {"kind": "logistic", "ridge": 1e-3}
    return {
        "name": name,
        "data": {"synthetic": {"n": n, "p": p, "task": task, "condition_number": 10, "support_size": 3, **extra}},
        "loss": loss,
        "regularizer": {"kind": "l1", "lam_rel": 0.1},
    }


def write_spec(tmp_path, solvers, problems=None, budget=10, **extra):
    spec = {
        "schema": "sapphire-experiment/1",
        "name": "t",
        "seed": 3,
        "output_dir": "out",
        "budget": {"max_passes": budget},
        "problems": problems or [synthetic_problem()],
        "solvers": solvers,
        **extra,
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return path


SSN = {"name": "ssn", "method": "sapphire-ssn", "config": {"b_h": 60}}


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def without_seconds(rows):
    i = TRACE_HEADER.index("seconds")
    return [r[:i] + r[i + 1 :] for r in rows]


class TestRun:
    def test_minimal_spec(self, tmp_path, capsys):
        spec = write_spec(tmp_path, [SSN])
        assert main(["run", str(spec)]) == 0
        out = tmp_path / "out"
        assert [p.name for p in (out / "traces").iterdir()] == ["lasso__ssn.csv"]
        rows = read_csv(out / "traces" / "lasso__ssn.csv")
        assert tuple(rows[0]) == TRACE_HEADER and len(rows) > 2
        summary = json.loads((out / "summary.json").read_text())
        schema = json.loads(resources.files("sapphire").joinpath("schemas", "summary.schema.json").read_text())
        jsonschema.validate(summary, schema)
        prob = summary["problems"][0]
        assert prob["r_best"] == prob["solvers"][0]["final_objective"]
        assert prob["solvers"][0]["status"] == "ok"
        assert "lasso/ssn: ok" in capsys.readouterr().out

    def test_missing_dataset(self, tmp_path, capsys):
        prob = {"name": "real", "data": {"path": "nowhere/rcv1.svm"}, "loss": {"kind": "squared"}, "regularizer": {"kind": "l1", "lam": 0.1}}
        spec = write_spec(tmp_path, [SSN], problems=[prob])
        assert main(["run", str(spec)]) == 2
        assert "nowhere/rcv1.svm" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "mutate, needle",
        [
            (lambda s: s.update(solvers=[]), "solvers"),
            (lambda s: s["budget"].update(max_passes=0), "budget/max_passes"),
            (lambda s: s.update(schema="v0"), "schema"),
            (lambda s: s["solvers"][0].update(method="lbfgs"), "solvers/0/method"),
            (lambda s: s["problems"][0]["regularizer"].update(lam=1.0), "problems/0/regularizer"),
        ],
    )
    def test_invalid_spec_diagnostics(self, tmp_path, capsys, mutate, needle):
        path = write_spec(tmp_path, [SSN])
        spec = json.loads(path.read_text())
        mutate(spec)
        path.write_text(json.dumps(spec))
        assert main(["run", str(path)]) == 2
        err = capsys.readouterr().err
        assert "does not match schema" in err and needle in err

    def test_duplicate_names_and_bad_json(self, tmp_path, capsys):
        path = write_spec(tmp_path, [SSN, SSN])
        assert main(["run", str(path)]) == 2
        path.write_text("{")
        assert main(["run", str(path)]) == 2
        assert main(["run", str(tmp_path / "absent.json")]) == 2

    def test_rerun_is_reproducible(self, tmp_path):
        solvers = [SSN, {"name": "nys", "method": "sapphire-nyssn", "config": {"b_h": 60, "rank": 5}}, {"name": "saga", "method": "saga"}]
        spec = write_spec(tmp_path, solvers)
        assert main(["run", str(spec), "-o", str(tmp_path / "a")]) == 0
        assert main(["run", str(spec), "-o", str(tmp_path / "b")]) == 0
        assert main(["run", str(spec), "-o", str(tmp_path / "c"), "--threads", "3"]) == 0
        for name in ("lasso__ssn.csv", "lasso__nys.csv", "lasso__saga.csv"):
            a = read_csv(tmp_path / "a" / "traces" / name)
            for other in ("b", "c"):
                assert without_seconds(a) == without_seconds(read_csv(tmp_path / other / "traces" / name))

    def test_cell_seeds_derive_from_spec_seed(self, tmp_path):
        spec = write_spec(tmp_path, [SSN, {"name": "svrg", "method": "proxsvrg"}], problems=[synthetic_problem("a"), synthetic_problem("b")])
        assert main(["run", str(spec)]) == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        cells = [s for p in summary["problems"] for s in p["solvers"]]
        assert [c["cell"] for c in cells] == [0, 1, 2, 3]
        for c in cells:
            assert c["seed"] == int(np.random.SeedSequence([3, c["cell"]]).generate_state(1)[0])

    def test_errors_and_divergence_recorded(self, tmp_path):
        solvers = [
            SSN,
            {"name": "blowup", "method": "proxsvrg", "config": {"eta": 1000.0}},
            {"name": "regime", "method": "proxsvrg", "config": {"b_g": 10**6}},
        ]
        spec = write_spec(tmp_path, solvers)
        assert main(["run", str(spec)]) == 1
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        status = {s["name"]: s for s in summary["problems"][0]["solvers"]}
        assert status["ssn"]["status"] == "ok"
        assert status["blowup"]["status"] == "diverged" and status["blowup"]["trace"]
        assert status["regime"]["status"] == "error" and "b_g" in status["regime"]["message"]
        assert summary["problems"][0]["r_best"] == status["ssn"]["final_objective"]

    def test_overrides(self, tmp_path, capsys):
        spec = write_spec(tmp_path, [SSN])
        assert main(["run", str(spec), "-o", str(tmp_path / "a"), "--override", "b_g=3", "--override", "m=5"]) == 0
        assert main(["run", str(spec), "-o", str(tmp_path / "b")]) == 0
        a = read_csv(tmp_path / "a" / "traces" / "lasso__ssn.csv")
        b = read_csv(tmp_path / "b" / "traces" / "lasso__ssn.csv")
        # stage cost (n + 2 m b_g + b_h) / n with n = 200
        assert float(a[2][1]) == (200 + 2 * 5 * 3 + 60) / 200
        assert a[2][1] != b[2][1]
        assert main(["run", str(spec), "--override", "bogus=1"]) == 2
        assert main(["run", str(spec), "--override", "novalue"]) == 2
        assert main(["run", str(spec), "--override", "alpha=-1"]) == 2
        assert main(["run", str(spec), "--threads", "0"]) == 2

    def test_strict_paper_flag(self, tmp_path):
        spec = write_spec(tmp_path, [SSN])
        assert main(["run", str(spec), "--strict-paper", "-o", str(tmp_path / "s")]) == 0
        assert (tmp_path / "s" / "summary.json").exists()

    def test_libsvm_data_and_env_dir(self, tmp_path, monkeypatch):
        rng = np.random.default_rng(0)
        lines = []
        for _ in range(80):
            x = rng.standard_normal(6)
            label = rng.choice([1, 2, 3])
            lines.append(f"{label} " + " ".join(f"{j + 1}:{float(v)!r}" for j, v in enumerate(x)))
        data_dir = tmp_path / "cache"
        data_dir.mkdir()
        (data_dir / "toy.svm").write_text("\n".join(lines) + "\n")
        monkeypatch.setenv("SAPPHIRE_DATA_DIR", str(data_dir))
        prob = {
            "name": "toy",
            "data": {"path": "toy.svm", "positive_label": 2, "normalize": True},
            "loss": {"kind": "logistic", "ridge": 1e-3},
            "regularizer": {"kind": "l1", "lam": 1e-3},
        }
        spec = write_spec(tmp_path, [SSN], problems=[prob])
        assert main(["run", str(spec)]) == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["problems"][0]["n_samples"] == 80 and summary["problems"][0]["n_features"] == 6
        (data_dir / "toy.svm").write_text("1 1:x\n")
        assert main(["run", str(spec)]) == 2

    def test_module_entry_point(self, tmp_path):
        spec = write_spec(tmp_path, [SSN], budget=3)
        proc = subprocess.run([sys.executable, "-m", "sapphire", "run", str(spec)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


class TestCompare:
    def test_single_solver(self, tmp_path, capsys):
        spec = write_spec(tmp_path, [SSN])
        main(["run", str(spec)])
        capsys.readouterr()
        assert main(["compare", str(tmp_path / "out")]) == 0
        table = [l for l in capsys.readouterr().out.splitlines() if l.strip()[:1].isdigit()]
        assert len(table) == 1 and "ssn" in table[0]
        rows = read_csv(tmp_path / "out" / "compare.csv")
        assert tuple(rows[0]) == ("solver", "x_kind", "x", "relative_error")
        assert {r[1] for r in rows[1:]} == {"passes", "seconds"}

    def test_diverged_marked(self, tmp_path, capsys):
        spec = write_spec(tmp_path, [SSN, {"name": "blowup", "method": "proxsvrg", "config": {"eta": 1000.0}}])
        main(["run", str(spec)])
        capsys.readouterr()
        assert main(["compare", str(tmp_path / "out"), "-o", str(tmp_path / "long.csv")]) == 0
        lines = capsys.readouterr().out.splitlines()
        blow = next(l for l in lines if "blowup" in l)
        assert DIVERGED_MARK in blow and not any(ch.isdigit() for ch in blow.split("blowup")[1])
        assert (tmp_path / "long.csv").exists()

    def test_csv_only_directory(self, tmp_path, capsys):
        spec = write_spec(tmp_path, [SSN])
        main(["run", str(spec)])
        (tmp_path / "out" / "summary.json").unlink()
        (tmp_path / "out" / "notes.csv").write_text("a,b\n1,2\n")
        capsys.readouterr()
        assert main(["compare", str(tmp_path / "out")]) == 0
        assert "lasso__ssn" in capsys.readouterr().out

    def test_empty_or_missing_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["compare", str(tmp_path / "empty")]) == 2
        assert main(["compare", str(tmp_path / "missing")]) == 2
        assert "no trace" in capsys.readouterr().err

    def test_ranking_desk_analogue(self, tmp_path, capsys):
        # ill-conditioned elastic-net logistic: preconditioned methods first
        prob = synthetic_problem("enet", n=1000, p=100, task="logistic")
        prob["data"]["synthetic"]["condition_number"] = 1e3
        prob["regularizer"] = {"kind": "l1", "lam": 1e-4}
        solvers = [
            {"name": "ssn", "method": "sapphire-ssn", "config": {"b_h": 400, "b_g": 100}},
            {"name": "nyssn", "method": "sapphire-nyssn", "config": {"b_h": 400, "b_g": 100, "rank": 40}},
            {"name": "svrg", "method": "proxsvrg", "config": {"b_g": 100}},
            {"name": "saga", "method": "saga"},
        ]
        spec = write_spec(tmp_path, solvers, problems=[prob], budget=60)
        assert main(["run", str(spec)]) == 0
        capsys.readouterr()
        main(["compare", str(tmp_path / "out")])
        ranked = [l.split()[1] for l in capsys.readouterr().out.splitlines() if l.strip()[:1].isdigit()]
        assert set(ranked[:2]) == {"ssn", "nyssn"}


def test_relative_errors():
    np.testing.assert_allclose(relative_errors([2.0, 1.5, 1.0], 1.0), [1.0, 0.5, 0.0])
    np.testing.assert_array_equal(relative_errors([2.0, 1.0], 0.0), [2.0, 1.0])
    assert np.all(np.isnan(relative_errors([1.0], None)))
