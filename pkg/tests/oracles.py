"""Independent reference implementations used by the evaluator tests."""

import numpy as np


def brute_force_map_cmc(features, pids, camids, is_query, ranks=(1, 5, 10)):
    """Explicit per-query loops: full ranking, protocol filter, precision at each hit."""
    aps, firsts, skipped = [], [], 0
    queries = [i for i in range(len(pids)) if is_query[i]]
    gallery = [j for j in range(len(pids)) if not is_query[j]]
    for q in queries:
        scored = []
        for j in gallery:
            if camids[q] != -1 and pids[j] == pids[q] and camids[j] == camids[q]:
                continue
            dist = 1.0 - float(np.dot(features[q], features[j]))
            scored.append((dist, j))
        scored.sort()  # ties fall back to gallery index, i.e. gallery order
        hits, precisions, first = 0, [], None
        for rank, (_, j) in enumerate(scored, start=1):
            if pids[j] == pids[q]:
                hits += 1
                precisions.append(hits / rank)
                if first is None:
                    first = rank
        if not precisions:
            skipped += 1
            continue
        aps.append(sum(precisions) / len(precisions))
        firsts.append(first)
    if not aps:
        return None, None, skipped
    cmc = {str(k): sum(f <= k for f in firsts) / len(firsts) for k in ranks}
    return sum(aps) / len(aps), cmc, skipped


def pairwise_separation(ft, fv, bt, bv):
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    n = len(ft)
    intra_fg = sum(cos(ft[i], fv[i]) for i in range(n)) / n
    intra_bg = sum(cos(bt[i], bv[i]) for i in range(n)) / n
    inter = 0.0
    for i in range(n):
        inter += sum(cos(f[i], b[i]) for f in (ft, fv) for b in (bt, bv)) / 4
    return intra_fg, intra_bg, inter / n
