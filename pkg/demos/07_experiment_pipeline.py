"""The full experiment pipeline, driven through the command line.

Every capability is also exposed as a CLI subcommand so studies are
reproducible from a single INI config: train models, calibrate exit
thresholds, attack, harvest oracle labels, fit a surrogate, transfer,
run a named study, and render report plots. This demo chains all eight
subcommands on a tiny problem and lists what they produced.

The same commands work from a shell, e.g.:
    exitnet train --config base.ini --out out/
"""

import textwrap
from pathlib import Path

from exitnet import cli

from common import ARTIFACTS

ARTIFACTS.mkdir(exist_ok=True)
root = ARTIFACTS / "pipeline"
out = root / "out"
root.mkdir(parents=True, exist_ok=True)


def write(name: str, text: str) -> Path:
    path = root / name
    path.write_text(textwrap.dedent(text))
    return path


dataset_block = f"""\

    [dataset]
    synthetic.count = 240
    synthetic.classes = 4
    synthetic.shape = 16x16x3
    synthetic.seed = 9
    eval_count = 8

    [seeds]
    seed = 1
    """
base = write("base.ini", f"""\
    [models]
    resid.family = residual
    resid.classes = 4
    resid.base_width = 8
    resid.checkpoint = {out}/resid.ckpt
    resid.type = sdnn
    resid.epochs = 3
    plain.family = plain-conv
    plain.classes = 4
    plain.base_width = 8
    plain.checkpoint = {out}/plain.ckpt
    plain.type = dynn
    plain.policy = {out}/plain_policy.json
    plain.epochs = 3

    [policy]
    target_fractions = 0.5, 0.5

    [attack]
    name = pgd
    epsilon = 8/255
    steps = 3
    samples = 4
    {dataset_block}""")
harvest = write("harvest.ini", f"""\
    [models]
    plain.family = plain-conv
    plain.classes = 4
    plain.base_width = 8
    plain.checkpoint = {out}/plain.ckpt
    plain.type = dynn
    plain.policy = {out}/plain_policy.json
    {dataset_block}""")
surrogate = write("surrogate.ini", f"""\
    [models]
    surro.family = residual
    surro.classes = 4
    surro.base_width = 8
    surro.checkpoint = {out}/surro.ckpt
    surro.epochs = 3
    plain.family = plain-conv
    plain.classes = 4
    plain.base_width = 8
    plain.checkpoint = {out}/plain.ckpt
    plain.type = dynn
    plain.policy = {out}/plain_policy.json

    [dataset]
    path = {out}/harvest.bin
    eval_count = 8

    [seeds]
    seed = 1
    """)
transfer = write("transfer.ini", f"""\
    [models]
    surro.family = residual
    surro.classes = 4
    surro.base_width = 8
    surro.checkpoint = {out}/surro.ckpt
    surro.type = sdnn
    plain.family = plain-conv
    plain.classes = 4
    plain.base_width = 8
    plain.checkpoint = {out}/plain.ckpt
    plain.type = dynn
    plain.policy = {out}/plain_policy.json

    [attack]
    name = pgd
    epsilon = 8/255
    steps = 3
    samples = 4
    {dataset_block}""")

steps = [
    ["train", "--config", str(base), "--out", str(out)],
    ["calibrate", "--config", str(base), "--out", str(out)],
    ["attack", "--config", str(base), "--out", str(out)],
    ["harvest", "--config", str(harvest), "--out", str(out)],
    ["surrogate", "--config", str(surrogate), "--out", str(out)],
    ["transfer", "--config", str(transfer), "--out", str(out)],
    ["study", "--name", "rq2-efficiency", "--config", str(transfer),
     "--out", str(out / "rq2")],
    ["report", "--out", str(out / "rq2")],
]
for argv in steps:
    print(f"$ exitnet {' '.join(argv)}")
    rc = cli.main(argv)
    assert rc == 0, f"step {argv[0]} failed"

print()
print("=== artifacts ===")
for path in sorted(out.rglob("*")):
    if path.is_file():
        print(f"{path.relative_to(root)}  ({path.stat().st_size} bytes)")
