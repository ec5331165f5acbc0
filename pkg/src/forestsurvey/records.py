"""Tree records and inventory CSV I/O, shared by the world oracle and the
online estimation pipeline."""

import csv
from dataclasses import dataclass, field


@dataclass
class TreeRecord:
    tree_id: int
    x: float
    y: float
    dbh_m: float
    height_m: float
    coverage_deg: float = 360.0
    flags: tuple = ()


@dataclass
class Inventory:
    records: list
    mission_id: str = ""
    frame_id: str = "map"
    timestamp: float = 0.0

    def __len__(self):
        return len(self.records)

    def sorted_records(self):
        return sorted(self.records, key=lambda r: r.tree_id)


GROUND_TRUTH_HEADER = ["id", "x", "y", "dbh_m", "height_m"]
INVENTORY_HEADER = ["id", "x", "y", "dbh_m", "height_m", "coverage_deg", "flags"]


def write_ground_truth_csv(inventory, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GROUND_TRUTH_HEADER)
        for r in inventory.sorted_records():
            w.writerow([r.tree_id, repr(float(r.x)), repr(float(r.y)), repr(float(r.dbh_m)), repr(float(r.height_m))])


def write_inventory_csv(inventory, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(INVENTORY_HEADER)
        for r in inventory.sorted_records():
            w.writerow(
                [
                    r.tree_id,
                    repr(float(r.x)),
                    repr(float(r.y)),
                    repr(float(r.dbh_m)),
                    repr(float(r.height_m)),
                    repr(float(r.coverage_deg)),
                    "|".join(r.flags),
                ]
            )


def read_inventory_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        for row in reader:
            rec = TreeRecord(
                tree_id=int(row[0]),
                x=float(row[1]),
                y=float(row[2]),
                dbh_m=float(row[3]),
                height_m=float(row[4]),
            )
            if len(header) > 5:
                rec.coverage_deg = float(row[5])
                rec.flags = tuple(row[6].split("|")) if row[6] else ()
            records.append(rec)
    return Inventory(records=records)
