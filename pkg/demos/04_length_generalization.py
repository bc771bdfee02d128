#!/usr/bin/env python3
"""Length generalization: the same weights, two attention modes.

Train a small model on 32-token windows, then evaluate next-token NLL at
context lengths far past anything it saw in training. In vanilla causal
mode the positional machinery is pushed outside its trained range and the
loss climbs; in lambda mode the mask plus distance clamp keep every
attention row inside familiar territory and the curve stays flat.
"""

from lm_infinite.corpus import SyntheticLanguage
from lm_infinite.evaluation import MilestoneSpec, continuation_eval, nll_curve
from lm_infinite.model import ToyModelConfig, init, train

config = ToyModelConfig(
    vocab_size=64, d_model=32, n_layers=2, n_heads=2,
    train_len=32, n_global=4, n_local=32, l_pretrain=32, seed=1,
)
lang = SyntheticLanguage(vocab_size=64, seed=99)
corpus = lang.sample(12, 400)
held_out = lang.sample(6, 360, seed=1234)

model = init(config)
train(model, corpus, steps=300, lr=2e-3, batch_shape=(8, None))
print(f"trained on windows of {config.train_len} tokens\n")

# --- NLL over a trailing 32-token window at each milestone ------------------
spec = MilestoneSpec((32, 64, 128, 256))
lam = nll_curve(model, held_out, spec, mode="lambda")
van = nll_curve(model, held_out, spec, mode="vanilla_causal")

print("context   lambda NLL   vanilla NLL")
for lp, vp in zip(lam, van):
    times = lp.milestone // config.train_len
    print(f"  {lp.milestone:4d} ({times}x)   {lp.nll:8.3f}   {vp.nll:10.3f}")

# --- continuation quality at 8x the training length -------------------------
cont_lam = continuation_eval(model, held_out, spec, gen_len=40, mode="lambda")
cont_van = continuation_eval(model, held_out, spec, gen_len=40,
                             mode="vanilla_causal")
print("\ngreedy continuation BLEU (gen_len=40):")
print("context   lambda   vanilla")
for lp, vp in zip(cont_lam, cont_van):
    print(f"  {lp.milestone:4d}     {lp.bleu:.3f}    {vp.bleu:.3f}")

print("\nSame parameters in both columns — only the attention pattern and")
print("the distance fed to the positional encoding differ.")
