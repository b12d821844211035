"""Comparing rate-quality curves: BD-Rate, break-even viewing fraction, IB check.

Run: python3 demos/rate_curves.py
"""

from scalecodec.evaluation import RateQualityCurve, bd_rate, break_even, ib_discrete_check

anchor = RateQualityCurve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39], "anchor")
better = anchor.shifted(rate_scale=0.7)
print(f"same quality at 70% of the rate -> BD-Rate {bd_rate(anchor, better):+.2f}%")

# base layer costs 40% and base+enhancement 130% of a single-layer codec
f = break_even(0.4, 1.3)
print(f"scalable coding wins while images are viewed less than {100 * f:.1f}% of the time")

# a deterministic quantizer never adds noise: I(X;Y) equals H(Y)
h_y, h_y_x, info = ib_discrete_check([0, 0, 1, 1, 2, 2, 2, 3], [1 / 8] * 8)
print(f"H(Y)={h_y:.4f}  H(Y|X)={h_y_x}  I(X;Y)={info:.4f}")
