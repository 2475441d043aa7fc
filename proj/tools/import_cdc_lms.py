#!/usr/bin/env python3
"""Convert CDC 2000 growth-chart CSV exports into the pedrisk LMS table format.

Usage:
    import_cdc_lms.py --cdc-dir DIR --out data/cdc_lms.txt [--check-out FILE]

DIR must hold the CDC files bmiage.csv, wtleninf.csv, lenageinf.csv and
lenage.csv (statage). They are published by the CDC National Center for
Health Statistics at https://www.cdc.gov/growthcharts/percentile_data_files.htm.

Output rows are `metric|sex|key|L|M|S`, sorted by (metric, sex, key).
`--check-out` writes the published P5/P50/P85/P95 columns of the BMI-for-age
file so the LMS math can be verified against CDC's own percentile values.
"""
import argparse
import csv
import os

SEX = {"1": "male", "2": "female"}


def read(path):
    with open(path, newline="", encoding="utf-8-sig") as f:
        return list(csv.DictReader(f))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cdc-dir", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--check-out")
    args = ap.parse_args()

    rows = []
    for metric, fname, key in (
        ("bmi_for_age", "bmiage.csv", "Agemos"),
        ("weight_for_length", "wtleninf.csv", "Length"),
    ):
        for r in read(os.path.join(args.cdc_dir, fname)):
            rows.append((metric, SEX[r["Sex"]], float(r[key]), r[key], r["L"], r["M"], r["S"]))

    # Stature-for-age: infant recumbent length below 24 months, standing height from 24 months.
    for r in read(os.path.join(args.cdc_dir, "lenageinf.csv")):
        if float(r["Agemos"]) < 24:
            rows.append(("stature_for_age", SEX[r["Sex"]], float(r["Agemos"]), r["Agemos"], r["L"], r["M"], r["S"]))
    for r in read(os.path.join(args.cdc_dir, "lenage.csv")):
        rows.append(("stature_for_age", SEX[r["Sex"]], float(r["Agemos"]), r["Agemos"], r["L"], r["M"], r["S"]))

    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    with open(args.out, "w") as f:
        f.write("# CDC 2000 growth reference LMS parameters (public domain, NCHS)\n")
        f.write("# metric|sex|key|L|M|S  key = age in months or recumbent length in cm\n")
        for metric, sex, _, key, l, m, s in rows:
            f.write(f"{metric}|{sex}|{key}|{l}|{m}|{s}\n")

    if args.check_out:
        with open(args.check_out, "w") as f:
            f.write("# sex|agemos|P5|P50|P85|P95 from CDC bmiage.csv\n")
            for r in read(os.path.join(args.cdc_dir, "bmiage.csv")):
                f.write(f"{SEX[r['Sex']]}|{r['Agemos']}|{r['P5']}|{r['P50']}|{r['P85']}|{r['P95']}\n")


if __name__ == "__main__":
    main()
