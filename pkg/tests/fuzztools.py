"""Shared helpers for driving the DRAM controller with random traffic."""

import numpy as np

from danmpsim import dram


def random_request_stream(controller, rng, n_requests, row_span=8, col_span=64,
                          write_frac=0.4, burst=8):
    """Push n_requests random requests through the controller.

    Addresses are confined to a small row/column window so the stream
    mixes row hits, misses, and conflicts. Returns the number of
    commands issued.
    """
    topo = controller.topo
    issued_before = len(controller.trace)
    pending = 0
    made = 0
    while made < n_requests or controller.pending:
        if made < n_requests:
            for _ in range(burst):
                if made >= n_requests:
                    break
                t = dram.AddressTuple(
                    channel=controller.channel,
                    rank=int(rng.integers(topo.ranks_per_channel)),
                    bankgroup=int(rng.integers(topo.bankgroups_per_rank)),
                    bank=int(rng.integers(topo.banks_per_bankgroup)),
                    row=int(rng.integers(row_span)),
                    column=int(rng.integers(min(col_span, topo.columns_per_row))),
                )
                kind = "write" if rng.random() < write_frac else "read"
                req = dram.MemRequest(kind, dram.encode_address(t, topo))
                if not controller.enqueue(req):
                    break
                made += 1
        best, min_earliest = controller._pick()
        if best is None and controller.pending:
            controller.cycle = max(controller.cycle + 1, min_earliest)
            continue
        controller.tick()
    controller.drain()
    return len(controller.trace) - issued_before
