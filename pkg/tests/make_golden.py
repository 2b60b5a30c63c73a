"""Regenerate the frozen values in tests/golden/.

Each value is computed by the package and accepted only after it agrees with
a plain-loop reimplementation written here. The package output is what gets
frozen, so the golden tests stay exact regression checks.

    python tests/make_golden.py
"""

import json
import math
from pathlib import Path

import numpy as np

from relnet import drnet as dn
from relnet import numkit as nk
from relnet import relmodel as rm
from relnet.benchmark import oracle_model
from relnet.data import DetectedObject, ImageRecord, Relationship
from relnet.evaluation import generate_scene_graph
from relnet.pipeline import CandidatePair, detect_image, recognize_pair
from relnet.spatial import BoundingBox, SpatialEncoder, encode_spatial, pair_masks

GOLDEN = Path(__file__).parent / "golden"


def loop_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    total = sum(e)
    return [v / total for v in e]


def loop_matvec(A, x):
    return [sum(A[i][j] * x[j] for j in range(len(x))) for i in range(len(A))]


def loop_conv_relu(x, W, b, stride):
    C_out, C_in, k, _ = W.shape
    H = x.shape[1]
    H_out = (H - k) // stride + 1
    out = np.zeros((C_out, H_out, H_out))
    for f in range(C_out):
        for i in range(H_out):
            for j in range(H_out):
                acc = b[f]
                for c in range(C_in):
                    for u in range(k):
                        for v in range(k):
                            acc += W[f, c, u, v] * x[c, i * stride + u, j * stride + v]
                out[f, i, j] = max(acc, 0.0)
    return out


def spatial_encoder():
    seed, subject, obj, size = 0, (40.0, 60.0, 220.0, 300.0), (180.0, 120.0, 400.0, 260.0), (640.0, 480.0)
    store = nk.ParamStore()
    enc = SpatialEncoder(store, mask_size=32)
    enc.init_params(np.random.default_rng(seed))
    masks = pair_masks(BoundingBox(*subject), BoundingBox(*obj), size)
    feature = encode_spatial(masks, enc)

    x = np.stack([masks.subject_mask, masks.object_mask]).astype(np.float64)
    for i, (_, _, stride) in enumerate(enc.schedule):
        x = loop_conv_relu(x, store[f"spatial.conv{i}.W"], store[f"spatial.conv{i}.b"], stride)
    ref = loop_matvec(store["spatial.fc.W"], list(x.ravel()))
    ref = [a + b for a, b in zip(ref, store["spatial.fc.b"])]
    assert np.max(np.abs(feature - np.array(ref))) < 1e-10
    return {"seed": seed, "subject": subject, "object": obj, "image_size": size,
            "feature": feature.tolist()}


def loop_meanfield_step(q_s, q_r, q_o, f, t):
    N, K = t.N, t.K
    zs = [float(t.W_a[s] @ f.x_s + t.b_a[s]) + sum(t.W_rs[r, s] * q_r[r] for r in range(K))
          + sum(t.W_so[s, o] * q_o[o] for o in range(N)) for s in range(N)]
    zr = [float(t.W_r[r] @ f.x_r + t.b_r[r]) + sum(t.W_rs[r, s] * q_s[s] for s in range(N))
          + sum(t.W_ro[r, o] * q_o[o] for o in range(N)) for r in range(K)]
    zo = [float(t.W_a[o] @ f.x_o + t.b_a[o]) + sum(t.W_so[s, o] * q_s[s] for s in range(N))
          + sum(t.W_ro[r, o] * q_r[r] for r in range(K)) for o in range(N)]
    return loop_softmax(zs), loop_softmax(zr), loop_softmax(zo)


def fixed_point():
    seed = 11
    rng = np.random.default_rng(seed)
    t = rm.CrfPotentials.random(rng, 4, 5, 8, 8, scale=1.0)
    t.W_rs[...] = rng.uniform(-5, 5, t.W_rs.shape)
    t.W_ro[...] = rng.uniform(-5, 5, t.W_ro.shape)
    t.W_so[...] = rng.uniform(-5, 5, t.W_so.shape)
    f = rm.FeatureTriple(rng.normal(size=8), rng.normal(size=8), rng.normal(size=8))
    res = rm.meanfield_fixed_point(f, t, max_iters=500, damping=0.5)
    assert res.converged
    # stationarity checked with the scalar update
    q = res.beliefs
    step = loop_meanfield_step(list(q.q_s), list(q.q_r), list(q.q_o), f, t)
    for new, old in zip(step, (q.q_s, q.q_r, q.q_o)):
        assert np.max(np.abs(np.array(new) - old)) < 1e-9
    return {"seed": seed, "iterations": res.iterations, "q_r": res.beliefs.q_r.tolist()}


def drnet_t3():
    from test_drnet import random_unit
    seed = 5
    rng = np.random.default_rng(seed)
    units = [random_unit(rng) for _ in range(3)]
    f = rm.FeatureTriple(rng.normal(size=8), rng.normal(size=8), rng.normal(size=8))
    q, _ = dn.drnet_forward(f, dn.DrNetConfig(units=3), units)

    u0 = units[0]
    q_s = loop_softmax([a + b for a, b in zip(loop_matvec(u0.W_a, f.x_s), u0.b_a)])
    q_r = loop_softmax([a + b for a, b in zip(loop_matvec(u0.W_r, f.x_r), u0.b_r)])
    q_o = loop_softmax([a + b for a, b in zip(loop_matvec(u0.W_a, f.x_o), u0.b_a)])
    for u in units:
        base_s = [a + b for a, b in zip(loop_matvec(u.W_a, f.x_s), u.b_a)]
        base_r = [a + b for a, b in zip(loop_matvec(u.W_r, f.x_r), u.b_r)]
        base_o = [a + b for a, b in zip(loop_matvec(u.W_a, f.x_o), u.b_a)]
        zs = [a + b + c for a, b, c in zip(base_s, loop_matvec(u.W_sr_free, q_r), loop_matvec(u.W_so, q_o))]
        zr = [a + b + c for a, b, c in zip(base_r, loop_matvec(u.W_rs, q_s), loop_matvec(u.W_ro, q_o))]
        zo = [a + b + c for a, b, c in zip(base_o, loop_matvec(u.W_os_free, q_s), loop_matvec(u.W_or_free, q_r))]
        q_s, q_r, q_o = loop_softmax(zs), loop_softmax(zr), loop_softmax(zo)
    got = np.concatenate([q.q_s, q.q_r, q.q_o])
    assert np.max(np.abs(got - np.array(q_s + q_r + q_o))) < 1e-12
    return {"seed": seed, "beliefs": got.tolist()}


def recognize_record(seed):
    """One image with three detections, built from a seeded generator."""
    rng = np.random.default_rng(seed)
    boxes = [BoundingBox(20.0, 30.0, 200.0, 250.0), BoundingBox(150.0, 100.0, 420.0, 300.0),
             BoundingBox(400.0, 200.0, 600.0, 460.0)]
    dets = [DetectedObject(b, rng.normal(size=6) * 2.0) for b in boxes]
    union = {(i, j): rng.normal(size=5) for i in range(3) for j in range(3) if i != j}
    return ImageRecord("img0", 640.0, 480.0, dets, union, [Relationship(0, 1, 1, 0, 2)])


def recognize():
    seed, units = 7, 6
    rng = np.random.default_rng(seed)
    theta = rm.CrfPotentials.random(rng, 3, 4, 6, 5, scale=1.0)
    record = recognize_record(seed + 1)
    model = oracle_model(theta, units=units)
    q = recognize_pair(CandidatePair(0, 1), record, model)

    f = rm.FeatureTriple(record.detections[0].appearance, record.union_features[(0, 1)],
                         record.detections[1].appearance)
    q0 = rm.initial_beliefs(f, theta)
    q_s, q_r, q_o = list(q0.q_s), list(q0.q_r), list(q0.q_o)
    for _ in range(units):
        q_s, q_r, q_o = loop_meanfield_step(q_s, q_r, q_o, f, theta)
    got = np.concatenate([q.q_s, q.q_r, q.q_o])
    assert np.max(np.abs(got - np.array(q_s + q_r + q_o))) < 1e-12
    return {"seed": seed, "record_seed": seed + 1, "units": units, "beliefs": got.tolist()}


def scene_graph():
    seed, floor = 7, 0.05
    theta = rm.CrfPotentials.random(np.random.default_rng(seed), 3, 4, 6, 5, scale=1.0)
    record = recognize_record(seed + 1)
    preds = detect_image(record, oracle_model(theta, units=6), top_k=None)
    graph = generate_scene_graph(preds, score_floor=floor)

    # nodes keyed by (category, box), numbered in order of first appearance
    nodes, edges = {}, []
    for p in preds:
        if p.score >= floor:
            ends = []
            for key in ((p.s, tuple(p.subject_box)), (p.o, tuple(p.object_box))):
                nodes.setdefault(key, len(nodes))
                ends.append(nodes[key])
            if ends[0] != ends[1]:
                edges.append((ends[0], p.r, ends[1]))
    assert [(c, tuple(b)) for c, b in graph.nodes] == list(nodes)
    assert graph.edges == edges and edges
    return {"seed": seed, "record_seed": seed + 1, "units": 6, "score_floor": floor,
            "graph": graph.to_dict()}


def main():
    GOLDEN.mkdir(exist_ok=True)
    for name, fn in (("spatial_encoder", spatial_encoder), ("fixed_point", fixed_point),
                     ("drnet_t3", drnet_t3), ("recognize_pair", recognize),
                     ("scene_graph", scene_graph)):
        doc = fn()
        (GOLDEN / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", name)


if __name__ == "__main__":
    main()
