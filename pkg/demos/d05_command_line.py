"""
The command-line pipeline
=========================

The same steps driven through ``python3 -m tinc3d`` with a JSON config.
Any key can be overridden with ``--set dotted.key=value``.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

root = Path(tempfile.mkdtemp(prefix="tinc3d_cli_"))
config = root / "run.json"
config.write_text((Path(__file__).with_name("tiny_config.json")).read_text())


def tinc(*args):
    cmd = [sys.executable, "-m", "tinc3d", *args, "--config", str(config)]
    print("$", " ".join(cmd[1:]))
    print(subprocess.run(cmd, check=True, capture_output=True, text=True).stdout)


tinc("synth", "--out", str(root / "data"))
tinc("pretrain", "--data", str(root / "data"), "--out", str(root / "run"))
ckpt = root / "run" / "ckpt_2.bin"
tinc("eval", str(ckpt), "--data", str(root / "data"), "--out", str(root / "eval"),
     "--set", "eval.epochs=5")
tinc("equivariance", str(ckpt), "--data", str(root / "data"), "--patients", "4",
     "--out", str(root / "eq"))
tinc("glcm", "--data", str(root / "data"))
print(json.dumps(json.loads((root / "eval/metrics_linear.json").read_text()), indent=1))
