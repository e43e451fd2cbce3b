"""Empirical behavior of the reference pipeline beyond the acceptance gate."""

import numpy as np
import pytest

from ssmcompose import continuation_loss, zero_state
from ssmcompose.evaluate import evaluate_methods


def test_true_context_state_beats_zero_state(ref_corpus, reference_models, eval_store_lm):
    """Conditioning on the relevant context's stored state lowers the mean
    continuation loss versus the zero state, over 200 queries."""
    _, eval_items = ref_corpus
    params = reference_models.pretrained
    cfg = params.config
    with_ctx = np.empty(200)
    without = np.empty(200)
    for i, it in enumerate(eval_items[:200]):
        cid = eval_store_lm.query(it.context_tokens, 1)[0][0]
        state = eval_store_lm.entry(cid).state
        with_ctx[i] = continuation_loss(
            it.query_tokens, it.continuation_tokens, state.to_layer_states(), params
        )
        without[i] = continuation_loss(
            it.query_tokens, it.continuation_tokens, zero_state(cfg), params
        )
    assert with_ctx.mean() < without.mean()


def test_cyclic_and_symmetric_rows_nearly_agree(ref_corpus, reference_models, eval_store_bptc):
    """Mean losses of the two group-averaged methods track each other closely.

    For k <= 2 the groups coincide, so the rows are identical to rounding.
    For k up to 6 they differ only through higher-order decay terms; on the
    reference model the measured gap is ~1.5e-3 nats, so 5e-3 is asserted.
    """
    _, eval_items = ref_corpus
    outcome = evaluate_methods(
        eval_store_bptc,
        reference_models.bptc,
        eval_items,
        methods=("picaso_r", "picaso_s"),
        k_values=(1, 2, 3, 6),
        max_queries=150,
    )
    by_k = {}
    for r in outcome.report.rows:
        by_k.setdefault(r.k, {})[r.method] = r.mean_loss
    for k in (1, 2):
        assert by_k[k]["picaso_r"] == pytest.approx(by_k[k]["picaso_s"], abs=1e-12)
    for k in (3, 6):
        assert by_k[k]["picaso_r"] == pytest.approx(by_k[k]["picaso_s"], abs=5e-3)


def test_k0_rows_identical_across_methods(ref_corpus, reference_models, eval_store_bptc):
    _, eval_items = ref_corpus
    outcome = evaluate_methods(
        eval_store_bptc,
        reference_models.bptc,
        eval_items,
        methods=("baseline", "soup", "picaso_r", "concat", "caso_worst"),
        k_values=(0,),
        max_queries=40,
    )
    losses = {r.method: r.mean_loss for r in outcome.report.rows}
    assert len(set(losses.values())) == 1
