import pytest

from darvrp.cli import main
from darvrp.evaluation import load_records
from darvrp.vrplib import parse_solution, read_instance

TINY_CONFIG = """\
steps = 2
n_low = 6
base_batch = 4
batch_cap = 4
embedding_dim = 8
heads = 2
encoder_layers = 1
ff_hidden = 16
seed = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "inst").mkdir()
    for seed in (1, 2):
        assert main(["generate", "-n", "6", "--seed", str(seed),
                     "-o", str(d / "inst" / f"g{seed}.vrp")]) == 0
    (d / "tiny.cfg").write_text(TINY_CONFIG)
    assert main(["train", str(d / "tiny.cfg"), "-o", str(d / "m.ckpt"),
                 "--report", str(d / "r.csv")]) == 0
    return d


def test_generate_writes_vrplib(workdir):
    inst = read_instance(workdir / "inst" / "g1.vrp")
    assert inst.n == 6 and inst.capacity == 30


def test_solve_each_solver(workdir):
    for solver in ("policy", "greedy", "exact"):
        out = workdir / f"{solver}.sol"
        args = ["solve", str(workdir / "inst" / "g1.vrp"), "--solver", solver, "-o", str(out)]
        if solver == "policy":
            args += ["--checkpoint", str(workdir / "m.ckpt")]
        assert main(args) == 0
        sol = parse_solution(out.read_text())
        assert sorted(c for r in sol.routes for c in r) == list(range(1, 7))


def test_solve_and_train_are_byte_deterministic(workdir):
    outs = []
    for i in range(2):
        out = workdir / f"det{i}.sol"
        assert main(["solve", str(workdir / "inst" / "g2.vrp"), "--checkpoint",
                     str(workdir / "m.ckpt"), "-o", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert main(["train", str(workdir / "tiny.cfg"), "-o", str(workdir / "m2.ckpt")]) == 0
    assert (workdir / "m.ckpt").read_bytes() == (workdir / "m2.ckpt").read_bytes()


def test_eval_dispersion_ablate(workdir, capsys):
    out = workdir / "eval.csv"
    assert main(["eval", str(workdir / "inst"), "--checkpoint", str(workdir / "m.ckpt"),
                 "-o", str(out)]) == 0
    recs = load_records(out)
    assert len(recs) == 2 * 3 and all(r.status == "ok" for r in recs)
    disp = workdir / "disp.csv"
    assert main(["dispersion", str(workdir / "inst" / "g1.vrp"), "--checkpoint",
                 str(workdir / "m.ckpt"), "--steps", "2", "--breakdown",
                 str(workdir / "bd.csv"), "-o", str(disp)]) == 0
    assert disp.read_text().splitlines()[0] == "step,candidates,count,fraction,tau"
    assert len(disp.read_text().splitlines()) == 3
    capsys.readouterr()
    assert main(["ablate", str(workdir / "inst"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--k-list", "2,5"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "K,mean_gap"


def test_exit_codes(workdir, tmp_path):
    assert main(["solve"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["generate", "-n", "5", "--demand-high", "99", "-o", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad.vrp"
    bad.write_text("NAME : x\nDIMENSION : 3\n")
    assert main(["solve", str(bad), "--solver", "greedy", "-o", str(tmp_path / "s")]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"junk")
    assert main(["solve", str(workdir / "inst" / "g1.vrp"), "--checkpoint", str(junk),
                 "-o", str(tmp_path / "s")]) == 2
    assert main(["solve", str(workdir / "inst" / "g1.vrp"), "-o", str(tmp_path / "s")]) == 1
