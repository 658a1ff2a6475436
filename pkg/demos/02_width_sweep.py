"""Width sweep on the synthetic regression task, desk-sized.

Two clients with different linear teachers train two-layer relu nets of
growing width, then merge once with the dense-curvature method. Wider nets
merge better: the table printed at the end should trend downward.

Runs in under a minute. The full-scale sweep is
``oneshot-fl synthetic-width --out width.csv``.
"""

from dataclasses import replace

import numpy as np

from oneshot_fl import aggregate, cli

cfg = replace(
    cli.default_config("synthetic-width"),
    widths=[16, 64, 256],
    seeds=[0, 1, 2],
    epochs_or_steps=512,  # shorter local runs than the full experiment
    methods=[aggregate.METHOD_FEDAVG, aggregate.METHOD_FULL],
    timing=False,
)
rows = cli.run_width_sweep(cfg)

print(f"{'width':>6} {'fedavg':>10} {'fedfisher':>10}")
for width in cfg.widths:
    losses = {}
    for method in cfg.methods:
        pts = [r.train_loss for r in rows if r.sweep == width and r.method == method]
        losses[method] = np.mean(pts)
    print(f"{width:>6} {losses[aggregate.METHOD_FEDAVG]:>10.4f} "
          f"{losses[aggregate.METHOD_FULL]:>10.4f}")

print()
print("global training loss of the merged model, averaged over seeds;")
print("the curvature-weighted column should shrink as width grows.")
