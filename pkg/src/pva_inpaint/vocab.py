"""Toy prompt vocabulary and tokenizer.

A fixed ~32-word vocabulary covering a neutral template, attribute words
and a single shared identity token. Prompts are lowercase words separated
by spaces or commas.
"""

import re

PAD = "<pad>"
S_STAR = "<s*>"

WORDS = [
    PAD, S_STAR,
    "photo", "of", "a", "person",
    "smiling", "frowning", "neutral",
    "glasses", "plain",
    "hair", "band", "face", "eyes", "mouth",
    "red", "green", "blue", "yellow", "purple", "orange",
    "cyan", "pink", "brown", "dark", "light",
    "wide", "narrow", "big", "small", "left",
]

WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
PAD_ID = WORD_TO_ID[PAD]
S_STAR_ID = WORD_TO_ID[S_STAR]

NEUTRAL_PROMPT = "photo of a person"

DEFAULT_PROMPT_LEN = 8


def tokenize(text):
    """Text to token ids; unknown words are an error (vocabulary is closed)."""
    ids = []
    for word in re.split(r"[\s,]+", text.strip().lower()):
        if not word:
            continue
        if word not in WORD_TO_ID:
            raise ValueError(f"word {word!r} not in vocabulary")
        ids.append(WORD_TO_ID[word])
    return ids


def encode_prompt(prompt, length=DEFAULT_PROMPT_LEN, append_s_star=False):
    """Token ids padded/truncated to `length`. None means the empty condition
    (all padding). The shared identity token is appended when requested."""
    if prompt is None:
        ids = []
    elif isinstance(prompt, str):
        ids = tokenize(prompt)
    else:
        ids = list(prompt)
    if append_s_star:
        ids = ids + [S_STAR_ID]
    ids = ids[:length]
    return ids + [PAD_ID] * (length - len(ids))
