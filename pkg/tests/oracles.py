"""Graph-free scalar reimplementations used as test oracles."""
import math

IGNORE = -100


def log_softmax(row, T=1.0):
    xs = [x / T for x in row]
    top = max(xs)
    lse = top + math.log(sum(math.exp(x - top) for x in xs))
    return [x - lse for x in xs]


def kl(zt_row, zs_row, T):
    lt, ls = log_softmax(zt_row, T), log_softmax(zs_row, T)
    return sum(math.exp(a) * (a - b) for a, b in zip(lt, ls))


def ce(zs_row, label):
    return -log_softmax(zs_row)[label]


def distill_objective(zt, zs, labels, attention, alphas, T):
    """Per-example loop: alpha_b T^2 KL + (1 - alpha_b) CE at counted positions, / global N.

    ``zt`` may be None (plain CE). Returns (loss, N); loss is 0.0 when N = 0.
    """
    total, n = 0.0, 0
    for b in range(len(zs)):
        a = alphas[b]
        for t in range(len(zs[b])):
            if attention[b][t] != 1 or labels[b][t] == IGNORE:
                continue
            n += 1
            hard = ce(list(zs[b][t]), int(labels[b][t]))
            soft = 0.0 if zt is None else kl(list(zt[b][t]), list(zs[b][t]), T)
            total += a * T * T * soft + (1 - a) * hard
    return (total / n if n else 0.0), n


def adamw_scalar(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    p = p - lr * wd * p
    p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p, m, v
