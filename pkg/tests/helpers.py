"""Shared test utilities: independent policy walkers and trace builders.

The walkers below transliterate the skip/terminate procedure step by step
in plain Python, deliberately independent from the vectorized engine they
are used to check.
"""

from __future__ import annotations

import math

import numpy as np

from exitsim.trace import ExitTopology, SampleTrace, TraceSet

VGG_TOPOLOGY = ExitTopology(
    num_exits=3,
    segment_flops=(1.97, 56.98),
    exit_flops=(16.70, 14.23),
    server_flops=274.13,
    predictor_flops=0.40,
    num_classes=10,
    raw_feature_bits=262144,
    compression_ratio=64.0,
)


def literal_plain_walk(conf, lam, topo):
    """Stepwise plain policy for one sample: (exit_taken, device_mflops, transmitted)."""
    n_early = topo.num_early_exits
    device = 0.0
    for n in range(n_early):
        device += topo.segment_flops[n]
        device += topo.exit_flops[n]
        if conf[n] >= lam[n]:
            return n + 1, device, False
    return n_early + 1, device, True


def literal_predictor_walk(conf, scores, lam, gamma, topo):
    """Stepwise skip-aware policy for one sample.

    Returns (exit_taken, device_mflops, computed_exits, transmitted) with the
    predictor cost included in device_mflops.  The predictor cost is added
    after the walk so the addition order matches cost-by-cost accumulation.
    """
    n_early = topo.num_early_exits
    device = 0.0
    computed = []
    for n in range(n_early):
        device += topo.segment_flops[n]
        if scores[n] >= gamma[n]:
            computed.append(n)
            device += topo.exit_flops[n]
            if conf[n] >= lam[n]:
                return n + 1, device + topo.predictor_flops, computed, False
    return n_early + 1, device + topo.predictor_flops, computed, True


def literal_oracle_walk(conf, lam, topo):
    """Stepwise idealized policy: only the terminating exit is computed."""
    n_early = topo.num_early_exits
    taken = n_early + 1
    for n in range(n_early):
        if conf[n] >= lam[n]:
            taken = n + 1
            break
    device = sum(topo.segment_flops[: min(taken, n_early)])
    if taken <= n_early:
        device += topo.exit_flops[taken - 1]
    return taken, device, taken == n_early + 1


def literal_latency(device_mflops, transmitted, topo, env):
    lat = device_mflops * 1e6 / env.compute_speed
    if transmitted:
        lat += math.ceil(topo.raw_feature_bits / topo.compression_ratio) / env.bandwidth
    return lat


def random_topology(rng, num_exits=None, num_classes=None) -> ExitTopology:
    n = int(num_exits if num_exits is not None else rng.integers(2, 5))
    p = int(num_classes if num_classes is not None else rng.integers(2, 12))
    return ExitTopology(
        num_exits=n,
        segment_flops=rng.uniform(0.5, 60.0, n - 1),
        exit_flops=rng.uniform(0.5, 20.0, n - 1),
        server_flops=float(rng.uniform(50.0, 400.0)),
        predictor_flops=float(rng.uniform(0.1, 2.0)),
        num_classes=p,
        raw_feature_bits=int(rng.integers(1_000, 1_000_000)),
        compression_ratio=float(rng.uniform(1.0, 128.0)),
    )


def random_trace_set(rng, topo=None, n_samples=50, with_features=False) -> TraceSet:
    topo = topo if topo is not None else random_topology(rng)
    n, p = topo.num_exits, topo.num_classes
    samples = []
    for i in range(n_samples):
        conf = rng.uniform(1.0 / p, 1.0 - 1e-6, n)
        samples.append(SampleTrace(
            id=i,
            label=int(rng.integers(0, p)),
            confidences=conf,
            predicted=rng.integers(0, p, n),
            features=rng.normal(size=4) if with_features else None,
        ))
    return TraceSet(topo, tuple(samples))


def golden_fraction_traces(label_rate=1.0):
    """10,000 samples whose exit fractions under lam=(0.9, 0.9) are exactly
    66.62% / 19.81% / 13.57%."""
    samples = []
    i = 0
    for count, conf in [
        (6662, (0.95, 0.5, 0.9)),
        (1981, (0.5, 0.95, 0.9)),
        (1357, (0.5, 0.5, 0.9)),
    ]:
        for _ in range(count):
            correct = (i % 1000) < label_rate * 1000
            samples.append(SampleTrace(
                id=i,
                label=0,
                confidences=conf,
                predicted=(0, 0, 0) if correct else (1, 1, 1),
            ))
            i += 1
    return TraceSet(VGG_TOPOLOGY, tuple(samples))


def small_topology_like(num_exits=3, num_classes=10) -> ExitTopology:
    n_early = num_exits - 1
    return ExitTopology(
        num_exits=num_exits,
        segment_flops=tuple(1.0 + 0.5 * i for i in range(n_early)),
        exit_flops=tuple(0.4 + 0.1 * i for i in range(n_early)),
        server_flops=8.0,
        predictor_flops=0.05,
        num_classes=num_classes,
        raw_feature_bits=4096,
        compression_ratio=8.0,
    )


def random_lambda(rng, n_early):
    return tuple(rng.uniform(0.05, 0.99, n_early).tolist())


def random_gamma(rng, n_early):
    return tuple(rng.uniform(0.0, 1.0, n_early).tolist())
