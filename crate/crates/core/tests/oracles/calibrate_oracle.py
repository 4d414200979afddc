"""Noise multiplier oracle: bisection on sigma against the high-precision
RDP bound, composed over T steps and converted with
eps = min_alpha T*rdp(alpha) + ln(1/delta)/(alpha-1), alpha in 2..256.

Prints the sigma at which eps crosses the target exactly.
Usage: python3 calibrate_oracle.py
"""
from mpmath import mp, mpf, binomial, exp, log

mp.dps = 30

CASES = [(2.0, 1e-6, 0.01, 1000)]


def rdp(q, s2, alpha):
    total = mpf(0)
    for j in range(alpha + 1):
        total += binomial(alpha, j) * (1 - q) ** (alpha - j) * q ** j * exp(mpf(j * (j - 1)) / (2 * s2))
    return log(total) / (alpha - 1)


def epsilon(sigma, q, steps, delta):
    q = mpf(q)
    s2 = mpf(sigma) ** 2
    best = None
    for alpha in range(2, 257):
        e = steps * rdp(q, s2, alpha) + log(1 / mpf(delta)) / (alpha - 1)
        if best is None or e < best:
            best = e
        elif e > best * 2:
            break  # the bound is unimodal in alpha here; stop once far past the minimum
    return best


for eps, delta, q, steps in CASES:
    lo, hi = mpf("0.3"), mpf(50)
    for _ in range(40):
        mid = (lo + hi) / 2
        if epsilon(mid, q, steps, delta) > eps:
            lo = mid
        else:
            hi = mid
    print(f"eps={eps} delta={delta} q={q} steps={steps} sigma={mp.nstr(hi, 12)}")
