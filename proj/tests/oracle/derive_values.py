"""Independent high-precision evaluation of the constants frozen into the C++ tests.

Run: python3 tests/oracle/derive_values.py
"""
from mpmath import mp, mpf, sqrt, log, exp, tanh, sin, cos

mp.dps = 40


def linear(T, b0, b1):
    b0, b1 = mpf(b0), mpf(b1)
    if T == 1:
        return [b0]
    return [b0 + (b1 - b0) * i / (T - 1) for i in range(T)]


def derived(betas):
    ab, prod = [], mpf(1)
    for b in betas:
        prod *= 1 - b
        ab.append(prod)
    bt = [betas[0]] + [(1 - ab[i - 1]) / (1 - ab[i]) * betas[i] for i in range(1, len(betas))]
    return ab, bt


def align(gbar, ab):
    g = sqrt(gbar)
    levels = [mpf(1)] + [sqrt(a) for a in ab]
    for t in range(len(ab)):
        hi, lo = levels[t], levels[t + 1]
        if lo <= g <= hi:
            return t + (hi - g) / (hi - lo)
    return len(ab)


b4 = linear(4, "0.1", "0.4")
ab4, bt4 = derived(b4)
print("T4 alpha_bars", [mp.nstr(a, 17) for a in ab4])
print("T4 beta_tilde_2", mp.nstr(bt4[1], 17))
print("align(0.6)", mp.nstr(align(mpf("0.6"), ab4), 17))
print("q_sample t=2 x0=1 eps=1", mp.nstr(sqrt(ab4[1]) + sqrt(1 - ab4[1]), 17))
c0 = sqrt(ab4[0]) * b4[1] / (1 - ab4[1])
c1 = sqrt(1 - b4[1]) * (1 - ab4[0]) / (1 - ab4[1])
print("posterior coefs", mp.nstr(c0, 17), mp.nstr(c1, 17), "mean", mp.nstr(c0 + c1, 17))
xt = sqrt(ab4[1]) + sqrt(1 - ab4[1])
mu = (xt - b4[1] / sqrt(1 - ab4[1])) / sqrt(1 - b4[1])
print("reverse mu (xt = q_sample value)", mp.nstr(mu, 17))
print("kappa_1", mp.nstr(1 / (2 * (1 - b4[0])), 17))

ab200, _ = derived(linear(200, "1e-4", "0.02"))
print("alpha_bar_200", mp.nstr(ab200[-1], 17), "sqrt", mp.nstr(sqrt(ab200[-1]), 17),
      "sqrt(1-ab)", mp.nstr(sqrt(1 - ab200[-1]), 17))
ab50, _ = derived(linear(50, "1e-4", "0.05"))
print("alpha_bar_50 (1e-4, 0.05)", mp.nstr(ab50[-1], 17))

fast = [mpf(x) for x in ("0.0001", "0.001", "0.01", "0.05", "0.2", "0.7")]
gb, _ = derived(fast)
print("T200 fast aligned", [mp.nstr(align(g, ab200), 12) for g in gb])
fast50 = [mpf(x) for x in ("0.0001", "0.001", "0.01", "0.05", "0.2", "0.5")]
gb50, _ = derived(fast50)
print("T50 fast aligned", [mp.nstr(align(g, ab50), 12) for g in gb50])

print("gated tanh(1)*sigmoid(0)", mp.nstr(tanh(1) / 2, 17))
print("sin(1)", mp.nstr(sin(1), 17))

kl = mpf("0.9") * log(9) + mpf("0.1") * log(mpf(1) / 9)
print("mIS two-row", mp.nstr(exp(kl / 2), 17))
print("ln 10", mp.nstr(log(10), 17))

# rf: 30 layers cycle 10, 36 layers cycle 12
print("rf30", 2 * 3 * (2**10 - 1) + 1, "rf36", 2 * 3 * (2**12 - 1) + 1)


def params(N, C, k=3, mode="mel", bands=80, K=10, dl=128):
    n = C + C                      # input 1x1 conv
    n += 128 * 512 + 512 + 512 * 512 + 512
    if mode == "mel":
        n += 2 * (3 * 32 + 1)
    if mode == "label":
        n += K * dl
    per = 512 * C + C + 2 * C * C * k + 2 * C + C * C + C + C * C + C
    if mode == "mel":
        per += 2 * C * bands + 2 * C
    if mode == "label":
        per += 2 * C * dl + 2 * C
    n += N * per
    n += C * C + C + C + 1
    return n


print("params N30 C64 mel", params(30, 64))
print("params N12 C32 none (toy)", params(12, 32, mode="none"))
print("params N2 C4 none", params(2, 4, mode="none"))
