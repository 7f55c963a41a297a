"""Independent reference implementations written as plain Python loops over
scalars (``math`` only), used to check the vectorised library code."""
import math


def softmax_row(row, temperature):
    m = max(v / temperature for v in row)
    e = [math.exp(v / temperature - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy(teacher_row, student_row, tau_student, clamp=1e-12):
    ps = softmax_row(student_row, tau_student)
    return -sum(t * math.log(max(p, clamp)) for t, p in zip(teacher_row, ps))


def particle_loss(teacher, student, masks, tau_student):
    """``teacher``/``student`` map (view, slot) -> row for masked slots;
    ``masks`` is a list of 2B boolean lists (u views first)."""
    n_views = len(masks)
    total = 0.0
    for v, row in enumerate(masks):
        slots = [i for i, m in enumerate(row) if m]
        if not slots:
            continue
        view_loss = sum(cross_entropy(teacher[v, i], student[v, i], tau_student) for i in slots)
        total += view_loss / len(slots)
    # mean over jets of (l(u) + l(v)) / 2
    return total / n_views


def cls_loss(teacher, student, tau_student):
    """Rows 0..B-1 are view u, B..2B-1 view v."""
    b = len(teacher) // 2
    total = 0.0
    for j in range(b):
        total += cross_entropy(teacher[j], student[b + j], tau_student)
        total += cross_entropy(teacher[b + j], student[j], tau_student)
    return total / (2 * b)


def koleo_loss(vectors, eps=1e-8):
    unit = []
    for v in vectors:
        n = math.sqrt(sum(c * c for c in v))
        unit.append([c / n for c in v])
    total = 0.0
    for i, a in enumerate(unit):
        best = math.inf
        for j, b in enumerate(unit):
            if i != j:
                best = min(best, math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))
        total += math.log(best + eps)
    return -total / len(unit)


def ema_replay(initial, trajectory, taus):
    """Closed form of ``t_n = tau_n t_{n-1} + (1 - tau_n) s_n``:
    ``t_n = prod(tau) t_0 + sum_k (1 - tau_k) prod_{j>k} tau_j s_k``."""
    n = len(taus)
    coef0 = math.prod(taus)
    out = coef0 * initial
    for k in range(n):
        out = out + (1.0 - taus[k]) * math.prod(taus[k + 1 :]) * trajectory[k]
    return out


def auc_pairs(scores, is_signal):
    """Exhaustive pair counting, ties count one half."""
    sig = [s for s, y in zip(scores, is_signal) if y]
    bkg = [s for s, y in zip(scores, is_signal) if not y]
    wins = 0.0
    for s in sig:
        for b in bkg:
            wins += 1.0 if s > b else 0.5 if s == b else 0.0
    return wins / (len(sig) * len(bkg))


def eps_s_scan(scores, is_signal, eps_b):
    """Signal efficiency of the loosest threshold ``score >= t`` whose
    background efficiency does not exceed ``eps_b`` (scan over every
    distinct score)."""
    n_s = sum(1 for y in is_signal if y)
    n_b = len(is_signal) - n_s
    best = 0.0
    for t in sorted(set(scores)):
        fb = sum(1 for s, y in zip(scores, is_signal) if not y and s >= t) / n_b
        if fb <= eps_b:
            fs = sum(1 for s, y in zip(scores, is_signal) if y and s >= t) / n_s
            best = max(best, fs)
    return best


def eps_s_scan_interp(scores, is_signal, eps_b):
    """Linear interpolation between the two scanned operating points that
    bracket ``eps_b`` (points ordered by threshold, strictest first)."""
    n_s = sum(1 for y in is_signal if y)
    n_b = len(is_signal) - n_s
    points = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        fb = sum(1 for s, y in zip(scores, is_signal) if not y and s >= t) / n_b
        fs = sum(1 for s, y in zip(scores, is_signal) if y and s >= t) / n_s
        points.append((fb, fs))
    for (b0, s0), (b1, s1) in zip(points, points[1:]):
        if b0 <= eps_b < b1:
            return s0 + (s1 - s0) * (eps_b - b0) / (b1 - b0)
    return points[-1][1] if eps_b >= points[-1][0] else 0.0
