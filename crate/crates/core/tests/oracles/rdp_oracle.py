"""High-precision evaluation of the integer-order subsampled Gaussian RDP bound.

eps(alpha) = 1/(alpha-1) * ln sum_{j=0..alpha} C(alpha,j) (1-q)^(alpha-j) q^j exp(j(j-1)/(2 sigma^2))

Evaluated with mpmath at 80 significant digits; q and sigma are taken as the
exact binary values of the f64 literals used by the Rust tests.
Usage: python3 rdp_oracle.py > ../data/rdp_oracle.csv
"""
from mpmath import mp, mpf, binomial, exp, log

mp.dps = 80

QS = [0.001, 0.01, 0.1]
SIGMAS = [0.8, 1.3, 4.0]
ORDERS = range(2, 65)


def rdp(q, sigma, alpha):
    q = mpf(q)
    s2 = mpf(sigma) ** 2
    total = mpf(0)
    for j in range(alpha + 1):
        total += binomial(alpha, j) * (1 - q) ** (alpha - j) * q ** j * exp(mpf(j * (j - 1)) / (2 * s2))
    return log(total) / (alpha - 1)


print("q,sigma,alpha,eps_rdp")
for q in QS:
    for sigma in SIGMAS:
        for alpha in ORDERS:
            print(f"{q!r},{sigma!r},{alpha},{mp.nstr(rdp(q, sigma, alpha), 25)}")
