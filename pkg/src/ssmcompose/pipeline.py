"""Reference-model preparation used by the evaluation suite and demo scripts.

The pipeline is: pretrain a single-layer model as a plain language model on
document streams (teaching it to carry facts in its state), then fine-tune for
500 steps on retrieval-composed states.  The pretrained checkpoint is the
starting point for measuring how fine-tuning closes the composed-vs-concat
loss gap; the fine-tuned checkpoint is the reference model for method-ordering
and attribution comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .corpus import CorpusItem, composition_examples, lm_examples
from .model import ToyModelConfig, ToyModelParams, init_params
from .store import StateStore
from .trainer import train

REFERENCE_CONFIG = ToyModelConfig(embed_dim=32, state_dim=64, num_layers=1)

#: (steps, lr) stages; constant-rate plain SGD within each stage.
PRETRAIN_SCHEDULE = ((6000, 0.5), (6000, 0.2), (30000, 0.1))
FINETUNE_STEPS = 500
FINETUNE_LR = 0.1


@dataclass
class ReferenceModels:
    pretrained: ToyModelParams
    bptc: ToyModelParams
    bp2c: ToyModelParams


def build_store(items: Sequence[CorpusItem], params: ToyModelParams) -> StateStore:
    store = StateStore.create(params)
    for it in items:
        store.insert(it.context_tokens, params)
    return store


def pretrain_reference(
    train_items: Sequence[CorpusItem],
    config: ToyModelConfig = REFERENCE_CONFIG,
    init_seed: int = 7,
    example_seed: int = 11,
    train_seed: int = 13,
    schedule: Sequence[tuple[int, float]] = PRETRAIN_SCHEDULE,
) -> ToyModelParams:
    """Staged plain-SGD pretraining on zero-context document streams."""
    params = init_params(config, seed=init_seed)
    examples = lm_examples(train_items, seed=example_seed)
    for stage, (steps, lr) in enumerate(schedule):
        params = train(
            examples, params, steps=steps, lr=lr, objective="bptc", seed=train_seed + stage
        ).params
    return params


def prepare_reference_models(
    train_items: Sequence[CorpusItem],
    config: ToyModelConfig = REFERENCE_CONFIG,
    finetune_steps: int = FINETUNE_STEPS,
    finetune_lr: float = FINETUNE_LR,
) -> ReferenceModels:
    """Pretrained checkpoint plus per-objective composition fine-tunes."""
    pretrained = pretrain_reference(train_items, config)
    store = build_store(train_items, pretrained)
    examples = composition_examples(train_items, store, seed=31)
    bptc = train(
        examples, pretrained, steps=finetune_steps, lr=finetune_lr, objective="bptc", seed=41
    ).params
    bp2c = train(
        examples, pretrained, steps=finetune_steps, lr=finetune_lr, objective="bp2c", seed=41
    ).params
    return ReferenceModels(pretrained=pretrained, bptc=bptc, bp2c=bp2c)
