import json
import subprocess
import sys

import numpy as np
import pytest

from stemrecon.cli import main, read_config_file
from stemrecon.density import ParamVector, read_atoms_csv, write_atoms_csv
from stemrecon.scan import FrameStack, ScanGeometry, read_stack, write_stack
from stemrecon.synth import SynthConfig, expected_frame


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_simulate_defaults_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a), "--size", "40", "--frames", "2", "--seed", "5"]) == 0
    assert main(["simulate", "--out", str(b), "--size", "40", "--frames", "2", "--seed", "5"]) == 0
    ma, mb = manifest(a), manifest(b)
    assert [o["sha256"] for o in ma["outputs"]] == [o["sha256"] for o in mb["outputs"]]
    cfg = ma["config"]
    assert (cfg["spacing"], cfg["height"], cfg["sigma"], cfg["offset"], cfg["intra"], cfg["inter"]) == (
        19.37, 45.0, 3.0, 40.0, 0.05, 1.0)
    assert ma["seeds"] == {"seed": 5} and "wall_seconds" in ma["timings"]
    names = sorted(p.name for p in a.iterdir())
    assert names == ["frames.stk", "manifest.json", "truth_atoms.csv", "truth_shifts_1.bin", "truth_shifts_2.bin"]
    assert read_stack(a / "frames.stk").K == 2


def test_simulate_clean_frame(tmp_path):
    out = tmp_path / "clean"
    assert main(["simulate", "--out", str(out), "--size", "32", "--frames", "1", "--intra", "0",
                 "--inter", "0", "--no-noise"]) == 0
    stack = read_stack(out / "frames.stk")
    p = read_atoms_csv(out / "truth_atoms.csv")
    assert np.allclose(stack.frames[0], expected_frame(p, None, stack.geometry, SynthConfig().cutoff_tol),
                       rtol=1e-12, atol=1e-12)


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("# comment\nsize = 24\nframes = 1\nseed = 3\nno-noise = true\n")
    assert read_config_file(cfg)["no_noise"] == "true"
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    m = manifest(out)["config"]
    assert (m["size"], m["frames"], m["seed"], m["no_noise"]) == (24, 1, 9, True)
    (tmp_path / "bad.cfg").write_text("sizee = 3\n")
    assert main(["simulate", "--config", str(tmp_path / "bad.cfg"), "--out", str(out)]) == 2
    (tmp_path / "bad2.cfg").write_text("size = many\n")
    assert main(["simulate", "--config", str(tmp_path / "bad2.cfg"), "--out", str(out)]) == 2


def test_exit_codes(tmp_path):
    assert main(["simulate", "--sigma", "-1", "--out", str(tmp_path)]) == 2
    assert main(["reconstruct", str(tmp_path / "missing.stk"), "--out", str(tmp_path)]) == 4
    (tmp_path / "junk.stk").write_bytes(b"junk")
    assert main(["init-atoms", str(tmp_path / "junk.stk"), "--out", str(tmp_path)]) == 4
    assert main(["reconstruct", str(tmp_path / "junk.stk"), "--dissimilarity", "nope"]) == 2
    assert main(["reconstruct", "x.stk", "--dissimilarity", "mpg", "--out", str(tmp_path)]) in (2, 4)


def single_atom_stack(path, K=1):
    g = ScanGeometry(30, 30)
    u = expected_frame(ParamVector([[15.2, 14.6]], [45.0], 3.0, 40.0), None, g)
    write_stack(path, FrameStack(np.repeat(u[None], K, axis=0), g))


def test_init_atoms(tmp_path):
    g = ScanGeometry(16, 16)
    write_stack(tmp_path / "zero.stk", FrameStack(np.zeros((1, 16, 16)), g))
    assert main(["init-atoms", str(tmp_path / "zero.stk"), "--out", str(tmp_path / "z")]) == 0
    assert read_atoms_csv(tmp_path / "z" / "atoms.csv").n_atoms == 0
    single_atom_stack(tmp_path / "one.stk")
    assert main(["init-atoms", str(tmp_path / "one.stk"), "--out", str(tmp_path / "o"), "--png"]) == 0
    assert read_atoms_csv(tmp_path / "o" / "atoms.csv").n_atoms == 1
    assert (tmp_path / "o" / "h.png").exists() and (tmp_path / "o" / "initial_density.png").exists()
    assert main(["init-atoms", str(tmp_path / "one.stk"), "--frame", "3", "--out", str(tmp_path / "o")]) == 2


def test_reconstruct_and_replay(tmp_path):
    single_atom_stack(tmp_path / "one.stk", K=2)
    out = tmp_path / "rec"
    assert main(["reconstruct", str(tmp_path / "one.stk"), "--out", str(out), "--frames-limit", "1"]) == 0
    m = manifest(out)
    assert (m["config"]["epsilon"], m["config"]["nu_pen"], m["config"]["nu_hor"], m["config"]["nu_vert"]) == (
        0.1, 0.05, 0.1, 10.0)
    names = {o["path"].rsplit("/", 1)[-1] for o in m["outputs"]}
    assert {"atoms.csv", "shifts_1.bin", "stages.csv", "diagnostics_stage4.csv"} <= names
    assert "shifts_2.bin" not in names
    assert read_atoms_csv(out / "atoms.csv").n_atoms == 1
    again = tmp_path / "again"
    assert main(["replay", str(out / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "atoms.csv").read_bytes() == (out / "atoms.csv").read_bytes()


def test_precision_command(tmp_path, capsys):
    write_atoms_csv(tmp_path / "toy.csv", ParamVector([[0, 0], [19, 0], [40, 0]], [1, 1, 1], 3.0, 0.0))
    assert main(["precision", str(tmp_path / "toy.csv"), "--out", str(tmp_path), "--all-atoms"]) == 0
    assert "horizontal 1.414213562373095" in capsys.readouterr().out
    assert (tmp_path / "precision.csv").read_text().splitlines()[0] == "direction,precision,pairs"


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "stemrecon.cli", "simulate", "--size", "16", "--frames", "1",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "manifest.json").exists()


@pytest.mark.parametrize("argv", [["--help"], ["simulate", "--help"]])
def test_help(argv, capsys):
    assert main(argv) == 0
    assert "usage" in capsys.readouterr().out
