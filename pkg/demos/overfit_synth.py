"""Render the 16-image synthetic set, overfit the tiny full detector on it and print the per-class table.

    python demos/overfit_synth.py [out_dir]

Takes a few minutes on a laptop CPU.
"""

import sys
import tempfile
from pathlib import Path

from mddfnet.data import SynthConfig, synth_generate
from mddfnet.metrics import per_class_table
from mddfnet.train import TrainConfig, evaluate_samples, load_samples, train


def main(out: Path) -> None:
    data = synth_generate(SynthConfig(n_images=16, seed=0), out / "data")
    cfg = TrainConfig(variant="full", epochs=300, eval_interval=25, target_map50=0.95)
    res = train(cfg, data, out_dir=out / "run", echo=True)
    report = evaluate_samples(res.model, load_samples(data, cfg.input_size), len(data.label_set))
    print(per_class_table(report, data.label_set))
    print(f"checkpoint: {res.checkpoint_path}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="mddfnet-")))
