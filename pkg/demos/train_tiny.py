"""Train a 32-channel model on synthetic prototypes, save it, reload it and evaluate.

    python demos/train_tiny.py [outdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from cetnet.checkpoint import load_checkpoint
from cetnet.model import tiny
from cetnet.train import TrainConfig, evaluate, synthetic_dataset, train, write_dataset

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cetnet-"))
out.mkdir(parents=True, exist_ok=True)

data = synthetic_dataset(64, 10, 32, seed=0)
write_dataset(out / "train.bin", data.images, data.labels)
tiny().save(out / "model.json")

cfg = TrainConfig(steps=300, batch_size=16, lr=2e-3, warmup_steps=20, hflip=False,
                  data=str(out / "train.bin"), model_config=str(out / "model.json"),
                  checkpoint_dir=str(out / "ckpt"), checkpoint_every=100,
                  log_path=str(out / "metrics.jsonl"), eval_every_epochs=25)
(out / "train.json").write_text(json.dumps(cfg.to_dict(), indent=1))

result = train(cfg)
for rec in result.metrics:
    if "eval_acc" in rec:
        print(f"epoch {rec['epoch']:3d}: train acc {rec['train_acc']:.3f}, eval acc {rec['eval_acc']:.3f}")
losses = [r["loss"] for r in result.metrics if "loss" in r]
print(f"loss {losses[0]:.3f} -> {losses[-1]:.4f}; final accuracy {result.final_accuracy:.3f}")

restored = load_checkpoint(out / "ckpt" / "final.cetn")
print(f"reloaded checkpoint accuracy {evaluate(restored, data):.3f}")
print(f"artifacts in {out}")
print(f"same run from the shell: python -m cetnet train --train-config {out / 'train.json'}")
