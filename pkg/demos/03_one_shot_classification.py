"""One round of federated image classification, four merge methods.

Five clients get a deliberately skewed class split (alpha = 0.1 Dirichlet
partition, so most clients see only a couple of classes), train locally, and
send one update each. The server merges the same five updates four ways.
"""

from dataclasses import replace

from oneshot_fl import aggregate, cli

cfg = replace(
    cli.default_config("one-shot"),
    n_train=1500, n_test=500,  # smaller than the benchmark, same shape
    epochs_or_steps=10,
    seeds=[0],
    methods=[
        aggregate.METHOD_FEDAVG,
        aggregate.METHOD_FISHERMERGE,
        aggregate.METHOD_DIAG,
        aggregate.METHOD_KFAC,
    ],
    compress=False,
    timing=False,
)
rows = cli.run_one_shot(cfg)

print(f"{'method':>16} {'train loss':>12} {'test accuracy':>14}")
for row in sorted(rows, key=lambda r: r.test_accuracy):
    print(f"{row.method:>16} {row.train_loss:>12.4f} {row.test_accuracy:>14.3f}")

print()
print("with this much heterogeneity each local model is a specialist;")
print("plain averaging blurs them, curvature-weighted merging keeps")
print("each specialist's confident directions.")
