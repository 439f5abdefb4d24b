import csv
import json
import subprocess
import sys

import pytest

from petah.cli import EXIT_IO, EXIT_OK, EXIT_USER, EXIT_VERIFY, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, "--json", *argv)
    assert code == EXIT_OK, err
    return json.loads(out)


def error_line(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def checkpoint(workdir):
    path = workdir / "base.ptah"
    assert main(["pretrain", "--out", str(path), "--epochs", "1", "--n-train", "96", "--seed", "3"]) == EXIT_OK
    return path


def test_count_params_linear_probe(capsys):
    code, out, _ = run(capsys, "count-params", "--strategy", "linear_probe")
    assert code == EXIT_OK and "total: 0" in out


def test_count_params_petah_json(capsys):
    res = run_json(capsys, "count-params", "--strategy", "petah", "--rank", "8", "--conv-rank", "2")
    assert res["total"] == sum(res["per_layer"].values()) > 0


def test_usage_error(capsys):
    code, _, err = run(capsys, "count-params", "--strategy", "nonsense")
    assert code == EXIT_USER and error_line(err)["exit_code"] == EXIT_USER


def test_missing_checkpoint_is_io_error(capsys, workdir):
    code, _, err = run(capsys, "prune", "--checkpoint", workdir / "nope.ptah", "--sparsity", "0.5", "--out", workdir / "x.ptah")
    assert code == EXIT_IO and error_line(err)["error"] == "io"


def test_corrupted_checkpoint_is_io_error(capsys, checkpoint, workdir):
    bad = workdir / "bad.ptah"
    bad.write_bytes(checkpoint.read_bytes()[:-7])
    code, _, err = run(capsys, "count-params", "--strategy", "petah", "--checkpoint", bad)
    assert code == EXIT_IO and "checksum" in error_line(err)["message"]


def test_prune_reports_sparsity(capsys, checkpoint, workdir):
    res = run_json(capsys, "prune", "--checkpoint", checkpoint, "--sparsity", "0.9", "--out", workdir / "sparse.ptah")
    assert res["sparsity"] == pytest.approx(0.9, abs=0.01)
    code, _, err = run(capsys, "prune", "--checkpoint", checkpoint, "--sparsity", "1.5", "--out", workdir / "y.ptah")
    assert code == EXIT_USER


ADAPT_FLAGS = ["--epochs", "1", "--n-train", "60", "--head-lr", "0.01", "--adapter-lr", "0.01", "--final-seeds", "0", "--seed", "0"]


@pytest.fixture(scope="module")
def adapted(checkpoint, workdir):
    bundle, table = workdir / "task.bundle", workdir / "task.csv"
    code = main(
        ["adapt", "--checkpoint", str(checkpoint), "--strategy", "petah", "--rank", "8", "--conv-rank", "2",
         "--task", "color-statistics", "--out", str(bundle), "--csv", str(table), *ADAPT_FLAGS]
    )
    assert code == EXIT_OK
    return bundle, table


def test_adapt_then_eval_matches_csv(capsys, checkpoint, adapted):
    bundle, table = adapted
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    test_row = next(r for r in rows if r["split"] == "test" and r["seed"] == "0")
    res = run_json(capsys, "eval", "--checkpoint", checkpoint, "--bundle", bundle, "--split", "test")
    assert res["top1"] == pytest.approx(float(test_row["accuracy"]), abs=0)
    assert test_row["strategy"] == "petah" and test_row["r_c"] == "2"


def test_adapt_is_deterministic(capsys, checkpoint, adapted, workdir):
    bundle, _ = adapted
    again = workdir / "again.bundle"
    main(["adapt", "--checkpoint", str(checkpoint), "--strategy", "petah", "--rank", "8", "--conv-rank", "2",
          "--task", "color-statistics", "--out", str(again), *ADAPT_FLAGS])
    capsys.readouterr()
    assert again.read_bytes() == bundle.read_bytes()


def test_merge_dense_and_sparse(capsys, checkpoint, adapted, workdir):
    bundle, _ = adapted
    res = run_json(capsys, "merge", "--checkpoint", checkpoint, "--bundle", bundle, "--out", workdir / "merged.ptah")
    assert res["dense_override"] is False
    # merged checkpoint alone reproduces the bundle's accuracy
    direct = run_json(capsys, "eval", "--checkpoint", checkpoint, "--bundle", bundle)
    merged = run_json(capsys, "eval", "--checkpoint", workdir / "merged.ptah", "--task", "color-statistics", "--n-train", "60")
    assert merged["top1"] == pytest.approx(direct["top1"], abs=0.01)


def test_merge_refused_on_sparse_backbone(capsys, checkpoint, workdir):
    sparse = workdir / "sparse2.ptah"
    assert main(["prune", "--checkpoint", str(checkpoint), "--sparsity", "0.9", "--out", str(sparse)]) == EXIT_OK
    bundle = workdir / "sparse.bundle"
    assert main(["adapt", "--checkpoint", str(sparse), "--strategy", "petah", "--conv-rank", "1",
                 "--task", "frequency-patterns", "--out", str(bundle), *ADAPT_FLAGS]) == EXIT_OK
    capsys.readouterr()
    code, _, err = run(capsys, "merge", "--checkpoint", sparse, "--bundle", bundle, "--out", workdir / "m.ptah")
    line = error_line(err)
    assert code == EXIT_USER and line["error"] == "sparse-merge-refused" and "force_dense" in line["message"]
    res = run_json(capsys, "merge", "--checkpoint", sparse, "--bundle", bundle, "--out", workdir / "m.ptah", "--force-dense")
    assert res["dense_override"] is True


def test_bundle_on_wrong_backbone(capsys, adapted, workdir):
    other = workdir / "other.ptah"
    assert main(["pretrain", "--out", str(other), "--epochs", "1", "--n-train", "48", "--seed", "4"]) == EXIT_OK
    capsys.readouterr()
    code, _, err = run(capsys, "eval", "--checkpoint", other, "--bundle", adapted[0])
    assert code == EXIT_USER and error_line(err)["error"] == "fingerprint-mismatch"


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\njson = true\n\n[count-params]\nstrategy = petah\nconv-rank = 2\n")
    from_file = json.loads(run(capsys, "--config", cfg, "count-params")[1])
    assert from_file["policy"] == "petah(8,2)"
    overridden = json.loads(run(capsys, "--config", cfg, "count-params", "--conv-rank", "1")[1])
    assert overridden["policy"] == "petah(8,1)"


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[count-params]\nstrategy = petah\nbogus = 1\n")
    code, _, err = run(capsys, "--config", cfg, "count-params")
    assert code == EXIT_USER and "bogus" in error_line(err)["message"]


def test_verify_quick(capsys):
    code, out, _ = run(capsys, "verify", "--quick")
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) == 6
    failed = [l for l in lines if l.startswith("FAIL")]
    assert code == (EXIT_VERIFY if failed else EXIT_OK)
    # every suite except the literal elementwise merge check must pass
    assert all(l.startswith("FAIL merge-equivalence:") for l in failed)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "petah", "count-params", "--strategy", "lora_attn", "--json"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["total"] == 26112
