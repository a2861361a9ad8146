"""Watch expected-positive mining improve while training EN+CL.

The synthetic data keeps full labels, so every epoch we can score the mined
set: precision and recall over the unannotated true positives, together
with the running-average scores of the three label groups.

    python demos/mining_trace.py --epochs 20 --n 600
"""

import argparse

import numpy as np

from singlepos.data import generate_synthetic, split, to_single_positive
from singlepos.losses import POS
from singlepos.trainer import TrainConfig, train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--consistency", default="cl", choices=["cl", "scl"])
    args = p.parse_args()

    records = generate_synthetic(args.n, num_classes=8, image_size=64, seed=args.seed)
    tr, va = split(records, (0.8, 0.2), seed=args.seed)
    tr = to_single_positive(tr, seed=args.seed)
    z = np.stack([r.z for r in tr])
    y = np.stack([r.y for r in tr])
    hidden = (z != POS) & (y == 1)

    cfg = TrainConfig.from_flat({
        "loss.primary": "en", "loss.consistency": args.consistency,
        "loss.gamma_max": 0.2 if args.consistency == "cl" else 1.0,
        "train.epochs": args.epochs, "train.seed": args.seed})
    print("epoch  val mAP  mined  precision  recall  s(annotated)  s(hidden pos)  s(negative)")
    state = None
    for _ in range(args.epochs):
        result = train(cfg, tr, va, state=state, stop_after=1)
        state = result.state
        mined = (state.masks == 1) & (z != POS)
        s = state.scores.s
        precision = y[mined].mean() if mined.any() else float("nan")
        recall = mined[hidden].mean()
        print(f"{state.epoch - 1:5d}  {result.reports[-1].map:7.4f}  {mined.sum():5d}  {precision:9.3f}  "
              f"{recall:6.3f}  {s[z == POS].mean():12.3f}  {s[hidden].mean():13.3f}  {s[y == 0].mean():11.3f}")


if __name__ == "__main__":
    main()
