"""Parameter counts along the ablation axes: structure, block counts, kernel sets, aggregation, r."""

import numpy as np

from s6tal.backbone import ModelConfig
from s6tal.model import ActionLocalizer

BASE = dict(c_in=32, c_emb=64, num_classes=3, state_dim=16)


def count(**kw) -> int:
    return ActionLocalizer(ModelConfig(**{**BASE, **kw}), rng=np.random.default_rng(0)).param_count()


def show(title: str, rows) -> None:
    print(f"\n{title}")
    width = max(len(name) for name, _ in rows)
    for name, kw in rows:
        print(f"  {name.ljust(width)}  {count(**kw):>9,d}")


def main() -> None:
    show("structure and (B_e, B_s, B_b)", [
        ("single (1,1,1)", dict(structure="single")),
        ("dual (1,1,1)", dict(structure="dual")),
        ("dual (2,1,1)", dict(b_e=2)),
        ("dual (1,2,1)", dict(b_s=2)),
        ("dual (1,1,2)", dict(b_b=2)),
    ])
    show("kernel sets and aggregation", [
        ("TFA {4} CFA {4}", dict(k_tfa=(4,), k_cfa=(4,))),
        ("TFA {2,3,4} CFA {2,4,8} sum", dict()),
        ("TFA {2,3,4} CFA {2,4,8} concat", dict(aggregate="concat")),
        ("shared directions", dict(share_directions=True)),
    ])
    show("recurrent passes r", [(f"r = {r}", dict(r=r)) for r in (1, 2, 4, 8, 16, 32)])


if __name__ == "__main__":
    main()
