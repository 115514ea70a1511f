"""Exact-arithmetic oracle for the five-dialogue bigram fixture.

Add-1 bigram LM with a <s> pad and an <unk> slot, trained on the rendered
transcripts of the first four dialogues. Probabilities are exact fractions;
logs are taken with 50-digit decimals.
"""
import re
from collections import Counter
from decimal import Decimal, getcontext
from fractions import Fraction

getcontext().prec = 50

DIALOGUES = {
    "fever": [("what is a fever", "a fever is a high body temperature"), ("how high", "above thirty eight degrees")],
    "headache": [("my head hurts", "rest and drink water"), ("my head hurts", "rest and drink water")],
    "cough": [
        ("cough medicine", "honey helps a cough"),
        ("for children", "honey is not for infants"),
        ("what about adults", "honey helps a cough"),
    ],
    "greeting": [("hello", "hi"), ("tell me about fever", "a fever is a high body temperature")],
    "water": [("is water good", "yes water is good"), ("why", "the body needs water"), ("how much", "about two litres a day")],
}
TRAIN = ["fever", "headache", "cough", "greeting"]


def toks(s):
    return re.findall(r"[A-Za-z0-9]+", s)


def render(rounds):
    return "".join(f"user: {u}\nassistant: {a}\n" for u, a in rounds)


corpus = [toks(render(DIALOGUES[k])) for k in TRAIN]
vocab = {"<unk>"} | {t for d in corpus for t in d}
V = len(vocab)
big, ctx = Counter(), Counter()
for d in corpus:
    seq = ["<s>"] + d
    for a, b in zip(seq, seq[1:]):
        big[(a, b)] += 1
        ctx[a] += 1


def norm(t):
    return t if t in vocab else "<unk>"


def nll(context, cont):
    prev = norm(context[-1]) if context else "<s>"
    total = Decimal(0)
    for t in cont:
        t = norm(t)
        p = Fraction(big[(prev, t)] + 1, ctx[prev] + V)
        total -= Decimal(p.numerator).ln() - Decimal(p.denominator).ln()
        prev = t
    return total / len(cont)


for name, rounds in DIALOGUES.items():
    for i in range(1, len(rounds) + 1):
        h = toks(render(rounds[: i - 1]))
        a = toks(rounds[i - 1][1])
        c, d = nll(h, a), nll([], a)
        print(f'("{name}", {i}, {c:.20f}, {d:.20f}, {c / d:.20f}),')
print("V =", V)
