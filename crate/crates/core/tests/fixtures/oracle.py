"""Independent reference values for golden_pairs.json.

Writes golden_metrics.json. Run from this directory:

    python3 oracle.py
"""
import json
import math
import string
from collections import Counter

CLASSES = [
    ["unremarkable"],
    ["cardiomediastinum", "mediastinal widening"],
    ["cardiomegaly", "enlarged heart"],
    ["opacity", "opacities"],
    ["nodule", "mass", "lesion"],
    ["edema"],
    ["consolidation"],
    ["pneumonia"],
    ["atelectasis"],
    ["pneumothorax"],
    ["effusion"],
    ["pleural thickening"],
    ["fracture"],
    ["tube", "catheter", "pacemaker"],
]
NEG = {"no", "without", "negative"}


def tok(s):
    s = "".join(" " if c in string.punctuation else c for c in s).lower()
    return s.split()


def grams(t, n):
    return Counter(tuple(t[i : i + n]) for i in range(len(t) - n + 1))


def bleu(C, R, n):
    c = sum(map(len, C))
    r = sum(map(len, R))
    logs = []
    for k in range(1, n + 1):
        m = tot = 0
        for a, b in zip(C, R):
            ga, gb = grams(a, k), grams(b, k)
            m += sum(min(v, gb[g]) for g, v in ga.items())
            tot += sum(ga.values())
        if m == 0:
            return 0.0
        logs.append(math.log(m / tot))
    bp = math.exp(1 - r / c) if c < r else 1.0
    return bp * math.exp(sum(logs) / n)


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge(a, b, beta=1.2):
    l = lcs(a, b)
    if l == 0:
        return 0.0
    p, r = l / len(a), l / len(b)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def meteor(a, b):
    align = []
    for i, w in enumerate(a):
        k = a[:i].count(w)
        js = [j for j, x in enumerate(b) if x == w]
        if k < len(js):
            align.append((i, js[k]))
    m = len(align)
    if m == 0:
        return 0.0
    p, r = m / len(a), m / len(b)
    f = p * r / (0.9 * p + 0.1 * r)
    chunks = 1 + sum(1 for x, y in zip(align, align[1:]) if not (y[0] == x[0] + 1 and y[1] == x[1] + 1))
    return f * (1 - 0.5 * (chunks / m) ** 3)


def cider(C, R):
    N = len(R)
    total = 0.0
    for a, b in zip(C, R):
        s = 0.0
        for n in range(1, 5):
            df = Counter()
            for r in R:
                df.update(set(grams(r, n)))
            w = lambda g: math.log(N) - math.log(max(1, df[g]))
            va = {g: v * w(g) for g, v in grams(a, n).items()}
            vb = {g: v * w(g) for g, v in grams(b, n).items()}
            na = math.sqrt(sum(x * x for x in va.values()))
            nb = math.sqrt(sum(x * x for x in vb.values()))
            if na > 0 and nb > 0:
                s += sum(x * vb.get(g, 0.0) for g, x in va.items()) / (na * nb) / 4
        total += s
    return 10 * total / len(C)


def labels(text):
    t = tok(text)
    out = []
    for phrases in CLASSES:
        hit = False
        for ph in phrases:
            p = ph.split()
            for s in range(len(t) - len(p) + 1):
                if t[s : s + len(p)] == p and not NEG & set(t[max(0, s - 3) : s]):
                    hit = True
        out.append(hit)
    return out


def ce(P, R):
    tp = fp = fn = 0
    for p, r in zip(P, R):
        lp, lr = labels(p), labels(r)
        for x, y in zip(lp, lr):
            tp += x and y
            fp += x and not y
            fn += y and not x
    pr = tp / (tp + fp) if tp + fp else 0.0
    rc = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
    return pr, rc, f1


pairs = json.load(open("golden_pairs.json"))
P = [x["prediction"] for x in pairs]
R = [x["reference"] for x in pairs]
C, T = [tok(p) for p in P], [tok(r) for r in R]
p, r, f = ce(P, R)
out = {
    "bleu": [bleu(C, T, n) for n in range(1, 5)],
    "rouge_l": sum(rouge(a, b) for a, b in zip(C, T)) / len(C),
    "meteor": sum(meteor(a, b) for a, b in zip(C, T)) / len(C),
    "cider": cider(C, T),
    "ce_precision": p,
    "ce_recall": r,
    "ce_f1": f,
}
json.dump(out, open("golden_metrics.json", "w"), indent=2)
print(json.dumps(out, indent=2))
