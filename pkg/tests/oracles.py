"""Brute-force reference implementations used by the test suite.

Everything here is pure Python over float lists, summed with math.fsum.
Nothing is shared with the library's numpy code paths, so agreement
between the two is meaningful.
"""

import math

LOG_FLOOR = 1e-12


def joint_graph(p):
    return [[a * b for b in p] for a in p]


def cross_joint_graph(p, p_other):
    return [[a * b for b in p_other] for a in p]


def smooth_labels(q, eps):
    n = len(q)
    hot = max(range(n), key=lambda i: q[i])
    return [1.0 - eps if i == hot else eps / (n - 1) for i in range(n)]


def graph_entropy_loss(a_pred, a_target):
    # -(1/N^2) * sum_ij pred_ij * log(clamp(target_ij, floor, 1))
    n = len(a_pred)
    terms = []
    for i in range(n):
        for j in range(n):
            t = min(max(a_target[i][j], LOG_FLOOR), 1.0)
            terms.append(-(a_pred[i][j] * math.log(t)))
    return math.fsum(terms) / (n * n)


def jgekd(p, p_other):
    return graph_entropy_loss(joint_graph(p), joint_graph(p_other))


def jgetkd(p_s, p_s_other, q, p_t, eps):
    q_smooth = smooth_labels(q, eps)
    return graph_entropy_loss(
        cross_joint_graph(p_s, p_s_other),
        cross_joint_graph(q_smooth, p_t),
    )


def cross_entropy(p, q, eps):
    q_smooth = smooth_labels(q, eps) if eps > 0 else list(q)
    terms = []
    for i in range(len(p)):
        terms.append(-(q_smooth[i] * math.log(max(p[i], LOG_FLOOR))))
    return math.fsum(terms)


def vanilla_kd(p_s, p_t):
    terms = []
    for i in range(len(p_s)):
        terms.append(-(p_t[i] * math.log(max(p_s[i], LOG_FLOOR))))
    return math.fsum(terms)


def splitmix64(z):
    mask = (1 << 64) - 1
    z &= mask
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & mask
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & mask
    return z ^ (z >> 31)


def pcg32_stream(seed, seq, count):
    """Reference PCG-XSH-RR 64/32 with the library's seeding protocol."""
    mask64 = (1 << 64) - 1
    mult = 6364136223846793005

    def step(state, inc):
        return (state * mult + inc) & mask64

    def output(state):
        xorshifted = (((state >> 18) ^ state) >> 27) & 0xFFFFFFFF
        rot = state >> 59
        return ((xorshifted >> rot) | (xorshifted << (32 - rot))) & 0xFFFFFFFF

    inc = ((seq << 1) | 1) & mask64
    state = step(0, inc)
    state = step((state + seed) & mask64, inc)
    out = []
    for _ in range(count):
        old = state
        state = step(state, inc)
        out.append(output(old))
    return out


def random_prob_vector(rng, n):
    """Dirichlet(1,...,1) draw as plain floats, via numpy Generator rng."""
    x = [-math.log(1.0 - rng.random()) for _ in range(n)]
    s = math.fsum(x)
    return [v / s for v in x]
