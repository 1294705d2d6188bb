"""Loop-based reference metrics, written without numpy vectorization or scipy."""

import math


def naive_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            p, g = pred[i][j] > 0, gt[i][j] > 0
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def naive_components(mask):
    """8-connected components by iterative flood fill: list of pixel lists."""
    h, w = len(mask), len(mask[0])
    seen = [[False] * w for _ in range(h)]
    comps = []
    for i in range(h):
        for j in range(w):
            if mask[i][j] > 0 and not seen[i][j]:
                stack, pixels = [(i, j)], []
                seen[i][j] = True
                while stack:
                    a, b = stack.pop()
                    pixels.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            x, y = a + da, b + db
                            if 0 <= x < h and 0 <= y < w and mask[x][y] > 0 and not seen[x][y]:
                                seen[x][y] = True
                                stack.append((x, y))
                comps.append(pixels)
    return comps


def _centroid(pixels):
    return (sum(p[0] for p in pixels) / len(pixels), sum(p[1] for p in pixels) / len(pixels))


def naive_target_match(pred, gt, dist_thresh=3.0):
    gts = [_centroid(c) for c in naive_components(gt)]
    preds = naive_components(pred)
    pcs = [_centroid(c) for c in preds]
    pairs = []
    for i, g in enumerate(gts):
        for j, p in enumerate(pcs):
            d = math.hypot(g[0] - p[0], g[1] - p[1])
            if d <= dist_thresh:
                pairs.append((d, g, p, i, j))
    pairs.sort(key=lambda t: t[:3])
    used_g, used_p = set(), set()
    for _, _, _, i, j in pairs:
        if i not in used_g and j not in used_p:
            used_g.add(i)
            used_p.add(j)
    fa = sum(len(c) for j, c in enumerate(preds) if j not in used_p)
    return len(used_g), len(gts), fa


def naive_evaluate(scores, gts, threshold):
    tp = fp = fn = tn = 0
    det = tot = fa = pix = 0
    for s, g in zip(scores, gts):
        pred = [[1 if v > threshold else 0 for v in row] for row in s]
        a, b, c, d = naive_confusion(pred, g)
        tp, fp, fn, tn = tp + a, fp + b, fn + c, tn + d
        x, y, z = naive_target_match(pred, g)
        det, tot, fa = det + x, tot + y, fa + z
        pix += len(s) * len(s[0])
    miou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    pd = det / tot if tot else 1.0
    return {
        "counts": (tp, fp, fn, tn),
        "miou": miou,
        "f1": f1,
        "pd": pd,
        "fa": fa / pix,
        "detected": det,
        "total": tot,
        "fa_pixels": fa,
    }
