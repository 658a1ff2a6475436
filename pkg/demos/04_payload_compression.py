"""What quantization and factor truncation do to an uplink payload.

Walks one weight vector through the scale-and-ceil quantizer at several
compression factors, then plans a Kronecker-factor budget for a small MLP
and shows the realized bits next to the plain-averaging baseline.
"""

import numpy as np

from oneshot_fl import compress

rng = np.random.default_rng(0)
x = rng.standard_normal(4096)

print("quantizing a 4096-float payload (raw cost: 32 bits per float)")
print(f"{'s_q':>4} {'bits/float':>11} {'total bits':>11} {'max error':>10} {'vs bound':>9}")
for s_q in (1, 2, 4, 8, 16):
    q = compress.quantize(x, s_q)
    err = float(np.max(np.abs(compress.dequantize(q) - x)))
    bound = q.max_abs / compress.level_count(s_q)
    bits = compress.bit_cost(q)
    print(f"{s_q:>4} {32 // s_q:>11} {bits:>11} {err:>10.2e} {err / bound:>8.1%}")

print()
print("planning Kronecker factors for a 784-64-10 MLP at s_q = 4")
layer_dims = [(785, 64), (65, 10)]  # bias-augmented input dim, output dim
d = sum(a * b for a, b in layer_dims)
plan = compress.kfac_budget_plan(layer_dims, d, 4)
print(f"kept ranks per layer: {plan.l_v}")
print(f"curvature payload: {plan.total_bits} bits "
      f"(budget {16 * d}, baseline weights cost {32 * d})")
