#!/usr/bin/env python3
"""Generate the bundled training corpus (data/corpus.txt).

The text comes from a small probabilistic grammar, so it is original and free
of copyright, and it regenerates byte-for-byte from the seed.

    python3 scripts/make_corpus.py --out data/corpus.txt
"""

import argparse
import random

NAMES = ["Ada", "Bram", "Cora", "Dell", "Esme", "Finn", "Greta", "Hugo", "Iris", "Jonah",
         "Kit", "Lena", "Milo", "Nell", "Otto", "Pia", "Quinn", "Rosa", "Silas", "Tess"]
PLACES = ["the mill", "the harbor", "the old bridge", "the orchard", "the market", "the lighthouse",
          "the forest road", "the valley", "the river bank", "the north field", "the chapel",
          "the station", "the library", "the bakery", "the quarry", "the garden wall"]
ANIMALS = ["fox", "heron", "dog", "horse", "owl", "cat", "goat", "crow", "hare", "badger"]
THINGS = ["lantern", "letter", "basket", "map", "key", "coat", "boat", "bell", "clock", "ladder",
          "kettle", "book", "rope", "candle", "wheel", "window", "door", "stone", "cart", "song"]
ADJ = ["small", "old", "quiet", "bright", "cold", "heavy", "green", "narrow", "broken", "warm",
       "strange", "patient", "silver", "crooked", "gentle", "tired", "careful", "wide", "dark",
       "early"]
ADV = ["slowly", "quietly", "at once", "again", "carefully", "without a word", "before dawn",
       "in the rain", "after supper", "for a long time", "once more", "with some care"]
VERB_T = [("carried", "carries"), ("found", "finds"), ("mended", "mends"), ("watched", "watches"),
          ("opened", "opens"), ("painted", "paints"), ("lost", "loses"), ("counted", "counts"),
          ("followed", "follows"), ("cleaned", "cleans"), ("sold", "sells"), ("kept", "keeps")]
VERB_I = [("waited", "waits"), ("laughed", "laughs"), ("slept", "sleeps"), ("walked", "walks"),
          ("listened", "listens"), ("worked", "works"), ("sang", "sings"), ("rested", "rests")]
PREP = ["near", "behind", "beside", "under", "across", "beyond", "inside", "along"]
TIME = ["In the morning", "By evening", "That winter", "On the third day", "Later", "At noon",
        "Before the storm", "When the bell rang", "Every spring", "Long ago"]
SAY = ["said", "asked", "whispered", "called", "answered", "replied"]
WEATHER = ["The wind turned east.", "Rain fell on the roofs.", "The sky was clear and pale.",
           "Fog lay over the water.", "Snow covered the road.", "The sun was low and red."]


class Grammar:
    def __init__(self, seed):
        self.r = random.Random(seed)

    def pick(self, xs):
        return self.r.choice(xs)

    def noun_phrase(self):
        roll = self.r.random()
        if roll < 0.3:
            return self.pick(NAMES)
        if roll < 0.55:
            return "the " + self.pick(ADJ) + " " + self.pick(THINGS + ANIMALS)
        if roll < 0.8:
            return "the " + self.pick(THINGS + ANIMALS)
        return "a " + self.pick(ADJ) + " " + self.pick(THINGS)

    def subject(self):
        if self.r.random() < 0.6:
            return self.pick(NAMES)
        return "the " + self.pick(ADJ) + " " + self.pick(ANIMALS)

    def place(self):
        return self.pick(PREP) + " " + self.pick(PLACES)

    def clause(self, present=False):
        tense = 1 if present else 0
        subj = self.subject()
        if self.r.random() < 0.6:
            body = f"{subj} {self.pick(VERB_T)[tense]} {self.noun_phrase()}"
        else:
            body = f"{subj} {self.pick(VERB_I)[tense]}"
        if self.r.random() < 0.5:
            body += " " + self.place()
        if self.r.random() < 0.3:
            body += " " + self.pick(ADV)
        return body

    def sentence(self):
        roll = self.r.random()
        if roll < 0.15:
            return self.pick(WEATHER)
        if roll < 0.3:
            s = self.pick(TIME) + ", " + self.clause()
        elif roll < 0.45:
            s = self.clause() + ", and " + self.clause()
        elif roll < 0.55:
            s = self.clause() + " because " + self.clause()
        elif roll < 0.7:
            speaker = self.pick(NAMES)
            line = self.clause(present=True)
            return f'"{line[0].upper() + line[1:]}," {speaker} {self.pick(SAY)}.'
        else:
            s = self.clause()
        return s[0].upper() + s[1:] + "."

    def paragraph(self):
        return " ".join(self.sentence() for _ in range(self.r.randint(3, 7)))

    def text(self, min_bytes):
        parts = []
        size = 0
        chapter = 1
        while size < min_bytes:
            if chapter == 1 or self.r.random() < 0.04:
                heading = f"Chapter {chapter}\n"
                parts.append(heading)
                size += len(heading) + 1
                chapter += 1
            p = self.paragraph()
            parts.append(p + "\n")
            size += len(p) + 2
        return "\n".join(parts)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--seed", type=int, default=20241016)
    ap.add_argument("--bytes", type=int, default=300_000)
    args = ap.parse_args()
    text = Grammar(args.seed).text(args.bytes)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


if __name__ == "__main__":
    main()
