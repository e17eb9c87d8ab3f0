#!/usr/bin/env python3
"""Regenerates the synthetic Somali fixtures under tests/fixtures/.

Deterministic: every file is a pure function of the seeds below. Run from
the repository root; the output is committed.
"""

import csv
import io
import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

SUBJECTS = [
    "dowladda", "madaxweynaha", "wasiirka", "guddiga", "ciidamada", "dadka", "ardayda",
    "beeraleyda", "ganacsatada", "dhakhaatiirta", "kooxda", "tababaraha", "shirkadda",
    "bangiga", "hay'adda", "maamulka", "gudoomiyaha", "xildhibaanka",
]
VERBS = [
    "ayaa sheegay in", "ayaa ka hadlay", "ayaa furay", "ayaa ansixiyay", "ayaa dhisay",
    "ayaa la kulmay", "ayaa soo bandhigay", "ayaa diiday", "ayaa taageeray", "ayaa baaritaan ku sameeyay",
]
PLACES = [
    "muqdisho", "hargeysa", "kismaayo", "garoowe", "baydhabo", "beledweyne", "boosaaso",
    "gaalkacyo", "jowhar", "berbera",
]
TIMES = ["maanta", "shalay", "toddobaadkan", "bishan", "sanadkan", "saaka", "caawa", "berri"]
TOPICS = {
    "politics": ["doorashada", "baarlamaanka", "dastuurka", "xildhibaanada", "heshiiska",
                 "mucaaradka", "golaha wasiirada", "siyaasadda"],
    "business": ["suuqa", "qiimaha", "ganacsiga", "lacagta", "dhoofinta", "canshuurta",
                 "maalgashiga", "shilinka"],
    "health": ["isbitaalka", "cudurka", "tallaalka", "daawada", "caafimaadka", "bukaanka",
               "jadeecada", "nafaqada"],
    "sports": ["kubadda cagta", "ciyaarta", "koobka", "orodka", "garoonka", "ciyaartoyda",
               "tartanka", "xulka qaranka"],
    "religion": ["masjidka", "salaadda", "soonka", "ciidda", "quraanka", "culimada",
                 "xajka", "diinta"],
    "entertainment": ["heesaha", "fanaaniinta", "riwaayadda", "filimka", "bandhigga",
                      "muusigga", "gabayga", "maansada"],
    "technology": ["internetka", "taleefanka", "kombiyuutarka", "barnaamijka", "shabakadda",
                   "tiknoolajiyada", "xogta", "mashiinka"],
}
TAILS = ["", " si weyn", " mar kale", " si degdeg ah", " kadib shir dheer", " iyadoo ay jiraan caqabado"]

REAL_MARKERS = ["sida ay xaqiijiyeen wararka rasmiga ah", "warbixin la daabacay ayaa muujisay",
                "ilo lagu kalsoon yahay ayaa sheegay", "sida ku cad war-saxaafadeedka"]
FAKE_MARKERS = ["deg deg: sir culus ayaa soo baxday", "la yaab! qof walba ha wadaago",
                "war aan la filayn oo la qariyay", "cajiib! runta laga qariyay dadka"]

NEUTRAL_COMMENTS = ["waan ku raacsanahay fikradaan", "mahadsanid warbixinta wanaagsan",
                    "allaha idin barakeeyo", "tani waa arrin muhiim ah", "waxaan rajeynayaa nabad",
                    "fikrad fiican ayaad keentay"]
TOXIC_BY_CATEGORY = {
    "abuse": ["waxaad tahay xayawaan", "afkaaga xir oo iska tag"],
    "obscene": ["hadal wasakh ah ayaad ku hadlaysaa", "ereyadaada fool xun"],
    "insult": ["waxaad tahay doqon", "nacas yahow maxaad garanaysaa"],
    "identity-hate": ["qabiilkaaga oo dhan waa dhiig-miirato", "dadkaaga oo dhan waa qashin"],
    "severe-toxic": ["waad ka xun tahay qof walba oo dunida jooga", "waxaad mudan tahay in lagu nacdo"],
    "threat": ["waan ku heli doonaa", "iska ilaali maalin uun baan ku qaban"],
}
CATEGORIES = ["abuse", "obscene", "insult", "identity-hate", "severe-toxic", "threat"]


def sentence(rng, topic=None):
    topic = topic or rng.choice(sorted(TOPICS))
    return (f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(TOPICS[topic])} "
            f"{rng.choice(PLACES)} {rng.choice(TIMES)}{rng.choice(TAILS)}.")


def cap(s):
    return s[:1].upper() + s[1:]


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def jsonl(rows):
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


def raw_corpora(rng):
    bbc = []
    for i in range(150):
        topic = rng.choice(sorted(TOPICS))
        sents = [cap(sentence(rng, topic)) for _ in range(rng.randint(2, 4))]
        text = " ".join(sents)
        if i % 17 == 3:
            text = text.replace(" ", " \U0001F600 ", 1)
        if i % 11 == 5:
            text = text.upper()
        bbc.append({"id": f"bbc-{i:04d}", "title": cap(rng.choice(TOPICS[topic])),
                    "text": text, "url": f"https://example.org/bbc/{i}", "source": "bbc"})
    # Pre-normalization duplicates: same text after case folding and spacing.
    for j in (7, 42, 99):
        dup = dict(bbc[j], id=f"bbc-dup-{j}")
        dup["text"] = "  ".join(bbc[j]["text"].lower().split(" "))
        bbc.append(dup)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "title", "text", "url"])
    for i in range(80):
        text = " ".join(cap(sentence(rng)) for _ in range(rng.randint(1, 3)))
        if i % 9 == 0:
            text = f"\"{text}\" ayuu yiri."
        w.writerow([f"voa-{i:03d}", "", text, ""])
    books = []
    for _ in range(40):
        books.append("\n".join(cap(sentence(rng)) for _ in range(rng.randint(2, 5))))
    return jsonl(bbc), buf.getvalue(), "\n\n".join(books) + "\n"


def distinct_sentences(rng, n):
    seen, out = set(), []
    while len(out) < n:
        s = sentence(rng)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def fakenews(rng, n):
    rows = []
    for i in range(n):
        label = "fake" if i % 2 else "real"
        marker = rng.choice(FAKE_MARKERS if label == "fake" else REAL_MARKERS)
        rows.append({"id": f"fn-{i:04d}", "text": f"{marker} {sentence(rng)}", "label": label})
    rng.shuffle(rows)
    return rows


def toxicity(rng, n):
    binary, multi = [], []
    for i in range(n):
        if i % 2:
            k = 1 if rng.random() < 0.7 else 2
            cats = sorted(rng.sample(CATEGORIES, k), key=CATEGORIES.index)
            text = " ".join(rng.choice(TOXIC_BY_CATEGORY[c]) for c in cats) + " " + rng.choice(
                ["adiga", "walaal", "ninkaas", "naagtaas"])
            binary.append({"id": f"tx-{i:04d}", "text": text, "label": "toxic"})
            multi.append({"id": f"tx-{i:04d}", "text": text, "labels": cats})
        else:
            text = f"{rng.choice(NEUTRAL_COMMENTS)} {rng.choice(['walaal', 'adiga', 'dhammaan'])}"
            binary.append({"id": f"tx-{i:04d}", "text": text, "label": "non-toxic"})
    order = list(range(len(binary)))
    rng.shuffle(order)
    return [binary[i] for i in order], multi


def topics(rng, per_class):
    rows = []
    for t in sorted(TOPICS):
        for i in range(per_class):
            rows.append({"id": f"{t[:3]}-{i:03d}", "text": sentence(rng, t), "label": t})
    rng.shuffle(rows)
    return rows


def separable(rng):
    rows = []
    for i in range(32):
        label = "fake" if i % 2 else "real"
        marker = "been abuur ah" if label == "fake" else "run la xaqiijiyay"
        rows.append({"id": f"sep-{i:02d}", "text": f"{marker} {sentence(rng)}", "label": label})
    return rows


def campaign(rng):
    items = []
    for i in range(1, 6):
        items.append({"id": f"item-{i:02d}", "text": f"{rng.choice(FAKE_MARKERS + REAL_MARKERS)} {sentence(rng)}",
                      "task": "fakenews", "source": rng.choice(["BBC News Somali", "Jowhar news site", "Other channels"])})
    for i in range(6, 11):
        c = rng.choice(CATEGORIES)
        text = rng.choice(TOXIC_BY_CATEGORY[c]) if i % 2 == 0 else rng.choice(NEUTRAL_COMMENTS)
        items.append({"id": f"item-{i:02d}", "text": text, "task": "toxicity",
                      "source": rng.choice(["Constitutional Amendments", "Celebrity court case", "Somali maritime case"])})
    return items


def main():
    rng = random.Random(20240601)
    bbc, voa, books = raw_corpora(rng)
    write(ROOT / "raw" / "bbc.jsonl", bbc)
    write(ROOT / "raw" / "voa.csv", voa)
    write(ROOT / "raw" / "books.txt", books)
    write(ROOT / "text" / "sentences_1000.txt", "\n".join(distinct_sentences(random.Random(1000), 1000)) + "\n")
    write(ROOT / "text" / "pretrain_50.txt", "\n".join(distinct_sentences(random.Random(50), 50)) + "\n")
    rng = random.Random(7)
    write(ROOT / "datasets" / "fakenews.jsonl", jsonl(fakenews(rng, 160)))
    binary, multi = toxicity(rng, 160)
    write(ROOT / "datasets" / "toxicity_binary.jsonl", jsonl(binary))
    write(ROOT / "datasets" / "toxicity_multilabel.jsonl", jsonl(multi))
    write(ROOT / "datasets" / "topics.jsonl", jsonl(topics(rng, 24)))
    write(ROOT / "datasets" / "separable32.jsonl", jsonl(separable(random.Random(32))))
    write(ROOT / "campaign" / "items.jsonl", jsonl(campaign(random.Random(10))))


if __name__ == "__main__":
    main()
