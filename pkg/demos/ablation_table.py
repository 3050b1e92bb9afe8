"""Train every ablation variant briefly on synthetic data and print one row per variant.

    python demos/ablation_table.py [epochs]

Short runs on 16 images say little about which variant is better. The point is the harness.
"""

import sys
import tempfile

from mddfnet.data import SynthConfig, synth_generate
from mddfnet.efficiency import count_params
from mddfnet.model import VARIANTS
from mddfnet.train import TrainConfig, evaluate_samples, load_samples, train


def fmt(x):
    return "    -" if x is None else f"{100 * x:5.1f}"


def main(epochs: int) -> None:
    data = synth_generate(SynthConfig(n_images=16, seed=0), tempfile.mkdtemp(prefix="mddfnet-abl-"))
    samples = load_samples(data, 128)
    print("variant    params  mAP50  mAP75  mAP50:95  AP_s   AP_m   AP_l")
    for v in VARIANTS:
        res = train(TrainConfig(variant=v, epochs=epochs, warmup_epochs=min(2, epochs), out_dir=""), data, out_dir=None)
        r = evaluate_samples(res.model, samples, len(data.label_set))
        print(f"{v:<9} {count_params(res.model.parameters()):>7}  {fmt(r.map50)}  {fmt(r.map75)}  {fmt(r.map5095)}"
              f"     {fmt(r.ap_small)}  {fmt(r.ap_medium)}  {fmt(r.ap_large)}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
