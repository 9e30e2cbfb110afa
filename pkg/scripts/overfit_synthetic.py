"""Generate the 50-video synthetic set, train the overfit configuration, report train/val mAP."""

import argparse
import json
import time
from pathlib import Path

from s6tal.backbone import ModelConfig
from s6tal.data import SynthSpec, load_annotations, synth_generate
from s6tal.train import InferConfig, OptimConfig, evaluate, load_samples, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--data-seed", type=int, default=42)
    ap.add_argument("--r", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    synth_generate(SynthSpec(num_videos=50, num_classes=3, feature_dim=32, seed=args.data_seed), out / "data")
    db = load_annotations(out / "data" / "annotations.json")
    cfg = ModelConfig(c_in=32, c_emb=64, num_classes=3, state_dim=8, r=args.r)
    t0 = time.perf_counter()
    res = train(cfg, OptimConfig(epochs=args.epochs, batch_size=4), db, out / "run", seed=args.seed, eval_every=10,
                log_fn=lambda rec: print(json.dumps({k: rec[k] for k in ("epoch", "train_loss", "seconds")}),
                                         flush=True))
    seconds = time.perf_counter() - t0
    summary = {"seconds": round(seconds, 1), "param_count": res.model.param_count()}
    for subset in ("train", "val"):
        rep, _ = evaluate(res.model, load_samples(db, subset), db, InferConfig(), "thumos")
        print(f"\n[{subset}]\n{rep.table()}")
        summary[subset] = dict(zip(rep.columns(), rep.row()))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
