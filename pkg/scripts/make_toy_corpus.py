"""Regenerate the bundled 64-pair NLI toy corpus and its antonym lexicon."""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "rereadnet" / "resources"

# premise, entailed, contradicted, neutral
ROWS = [
    ("a man is playing a guitar on stage", "a man plays music", "a man is sleeping at home",
     "a famous man is playing a concert"),
    ("two dogs run through a grassy field", "animals are running outside", "two dogs sleep indoors",
     "two dogs chase a ball"),
    ("a woman in a red dress is dancing", "a woman is dancing", "a woman is sitting still",
     "a woman is dancing at a wedding"),
    ("a child is eating an apple in the kitchen", "a child eats fruit", "a child is swimming",
     "a hungry child eats lunch"),
    ("an old man reads a newspaper on a bench", "a man is reading", "a man is running a race",
     "an old man waits for a bus"),
    ("a girl rides a bicycle down the street", "a girl is on a bike", "a girl is walking home",
     "a girl rides to school"),
    ("the boy is climbing a tall tree", "a boy climbs", "the boy is sitting on the ground",
     "the boy climbs to get a kite"),
    ("a couple walk hand in hand down a street", "two people walk together",
     "a couple is sitting on a bench", "a married couple walk to dinner"),
    ("a person in a red shirt is cooking dinner", "someone is cooking", "nobody is cooking",
     "a chef prepares a special meal"),
    ("three women are laughing at a table", "women are laughing", "three women are crying",
     "three friends share a joke"),
    ("a cat sleeps on a warm windowsill", "an animal is sleeping", "a cat is hunting outside",
     "a cat sleeps after eating"),
    ("a man wearing a black hat sings loudly", "a man sings", "a man is silent",
     "a man sings in a band"),
    ("two children build a sandcastle on the beach", "kids are at the beach",
     "two children are in a classroom", "two siblings build a castle"),
    ("a young woman is painting a portrait", "a woman paints", "a woman is driving a truck",
     "a woman paints her best friend"),
    ("a worker repairs a broken road", "someone fixes a road", "a worker is asleep",
     "a worker is paid to repair roads"),
    ("a dog jumps into a cold lake", "a dog is in water", "a dog stays dry on the couch",
     "a dog jumps to fetch a stick"),
    ("an artist draws with black ink", "an artist is drawing", "an artist is sleeping",
     "an artist draws a map"),
    ("a boy kicks a soccer ball in the park", "a boy plays with a ball", "a boy is reading inside",
     "a boy practices for a game"),
    ("a woman is holding an umbrella in the rain", "it is raining", "the sun is shining brightly",
     "a woman is waiting for a taxi"),
    ("two men are fishing from a small boat", "men are on a boat", "two men are flying a plane",
     "two brothers are fishing"),
    ("a baby is crying in a crib", "a baby cries", "a baby is laughing", "a baby is hungry"),
    ("a man in a blue jacket is running fast", "a man runs", "a man is standing still",
     "a man is late for work"),
]

ANTONYMS = [("sleeping", "playing"), ("sleep", "run"), ("sitting", "dancing"),
            ("sitting", "walk"), ("crying", "laughing"), ("silent", "sings"),
            ("standing", "running"), ("dry", "water"), ("nobody", "someone"),
            ("indoors", "outside"), ("walking", "rides")]


def main() -> None:
    pairs = []
    for i, (p, ent, con, neu) in enumerate(ROWS):
        for label, hyp in (("entailment", ent), ("contradiction", con), ("neutral", neu)):
            pairs.append({"pair_id": f"toy-{len(pairs)}", "sentence1": p, "sentence2": hyp,
                          "gold_label": label})
    pairs = pairs[:64]
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "toy_nli.jsonl", "w", encoding="utf-8") as fh:
        for rec in pairs:
            fh.write(json.dumps(rec) + "\n")
    with open(OUT / "toy_antonyms.tsv", "w", encoding="utf-8") as fh:
        for a, b in ANTONYMS:
            fh.write(f"{a}\t{b}\n")


if __name__ == "__main__":
    main()
