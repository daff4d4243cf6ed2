"""Independent brute-force oracle for hop-constrained shortest paths.

Enumerates every simple path with at most max_hops edges by DFS and picks the
minimum (cost, hop count, lexicographic node sequence).  Deliberately naive:
this is the reference the engine's layered relaxation is checked against.
"""


def enumerate_paths(edges, srcs, dsts, max_hops):
    """Yield (cost, path) for every simple path src->dst within the budget."""
    adj = {}
    for (u, v), w in edges.items():
        adj.setdefault(u, []).append((v, w))
    out = []

    def dfs(node, cost, path):
        if node in dsts and len(path) > 1:
            out.append((cost, tuple(path)))
        if len(path) - 1 >= max_hops:
            return
        for nxt, w in adj.get(node, []):
            if nxt in path:
                continue
            path.append(nxt)
            dfs(nxt, cost + w, path)
            path.pop()

    for s in sorted(srcs):
        dfs(s, 0.0, [s])
    return out


def best_path(edges, srcs, dsts, max_hops):
    """Minimum-cost simple path within the hop budget, or None."""
    paths = enumerate_paths(edges, srcs, dsts, max_hops)
    if not paths:
        return None
    return min(paths, key=lambda cp: (cp[0], len(cp[1]), cp[1]))
