"""
Reconstruction panels
=====================

Pre-trains briefly on synthetic vehicles, then writes a side-by-side strip
for one image: original | masked view | model fill-in | error heat map.
The same panel is available from the command line as `vmae reconstruct`.
"""

import tempfile
from pathlib import Path

from vmae.cli import main
from vmae.dataio import generate_synthetic

out = Path(tempfile.mkdtemp(prefix="panel-demo-"))
manifest = generate_synthetic(32, out / "data", image_size=32, seed=1,
                              caption_fraction=0.5)

config = out / "run.yaml"
config.write_text("""\
model:
  image_size: 32
  patch_size: 8
  d_enc: 16
  d_dec: 8
  enc_depth: 2
  dec_depth: 1
  enc_heads: 2
  dec_heads: 2
  distill_dim: 8
  sem_dim: 8
train:
  lr: 3.0e-3
  epochs: 8
  batch_size: 8
embedder:
  kind: stub
seed: 0
""")

assert main(["pretrain", "--config", str(config),
             "--data", str(out / "data" / "manifest.tsv"),
             "--out", str(out / "run")]) == 0

for ratio in ("0.5", "0.75"):
    panel = out / f"panel_{ratio.replace('.', '')}.png"
    main(["reconstruct",
          "--checkpoint", str(out / "run" / "ckpt_epoch0008.vmae"),
          "--image", str(out / "data" / "img_00003.png"),
          "--out", str(panel), "--ratio", ratio, "--seed", "2"])
