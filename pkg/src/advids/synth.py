"""Synthetic records in NSL-KDD text format.

Used for tests and offline smoke runs when the real KDDTrain+ file is not at
hand. Records are drawn from simple class-conditional distributions loosely
shaped after the traffic categories; they are not a substitute for the real
data when reproducing reported numbers.
"""

import numpy as np

from .data import NUMERIC_NAMES, RawRecord, format_record

_MIX = (("normal", 0.5346), ("dos", 0.3646), ("probe", 0.0925), ("r2l", 0.0079), ("u2r", 0.0004))
_NAMES = {
    "normal": ("normal",),
    "dos": ("neptune", "smurf", "back", "teardrop", "pod"),
    "probe": ("satan", "ipsweep", "portsweep", "nmap"),
    "r2l": ("warezclient", "guess_passwd", "warezmaster", "imap"),
    "u2r": ("buffer_overflow", "rootkit", "loadmodule", "perl"),
}
_COL = {name: i for i, name in enumerate(NUMERIC_NAMES)}


def _profile(cat, rng):
    """Return (protocol, service, flag, numeric vector) for one record of ``cat``."""
    x = np.zeros(len(NUMERIC_NAMES))
    rate = lambda lo, hi: float(np.clip(rng.uniform(lo, hi), 0, 1))  # noqa: E731

    def put(name, value):
        x[_COL[name]] = value

    if cat == "normal":
        proto = rng.choice(["tcp", "udp", "icmp"], p=[0.8, 0.15, 0.05])
        service = rng.choice(["http", "smtp", "ftp_data", "domain_u", "other", "ecr_i"],
                             p=[0.5, 0.15, 0.12, 0.13, 0.07, 0.03])
        flag = rng.choice(["SF", "REJ", "RSTO", "S1"], p=[0.93, 0.04, 0.02, 0.01])
        put("src_bytes", round(rng.lognormal(5.5, 1.2)))
        put("dst_bytes", round(rng.lognormal(7.5, 1.5)))
        put("logged_in", float(rng.random() < 0.75))
        put("count", rng.integers(1, 30))
        put("srv_count", rng.integers(1, 40))
        put("same_srv_rate", rate(0.8, 1.1))
        put("diff_srv_rate", rate(-0.05, 0.1))
        put("serror_rate", rate(-0.2, 0.05))
        put("rerror_rate", rate(-0.2, 0.08))
        put("dst_host_count", rng.integers(1, 256))
        put("dst_host_srv_count", rng.integers(100, 256))
        put("dst_host_same_srv_rate", rate(0.7, 1.1))
        put("dst_host_serror_rate", rate(-0.2, 0.05))
        put("duration", rng.integers(0, 3) * rng.integers(0, 50))
    elif cat == "dos":
        proto = rng.choice(["tcp", "icmp"], p=[0.85, 0.15])
        service = rng.choice(["private", "http", "ecr_i", "other", "telnet"],
                             p=[0.6, 0.1, 0.15, 0.1, 0.05])
        flag = rng.choice(["S0", "SF", "REJ"], p=[0.7, 0.2, 0.1])
        put("src_bytes", round(rng.lognormal(2.0, 2.0)))
        put("count", rng.integers(80, 512))
        put("srv_count", rng.integers(1, 40))
        put("serror_rate", rate(0.6, 1.2))
        put("srv_serror_rate", rate(0.6, 1.2))
        put("same_srv_rate", rate(-0.1, 0.3))
        put("diff_srv_rate", rate(0.0, 0.2))
        put("dst_host_count", 255)
        put("dst_host_srv_count", rng.integers(1, 40))
        put("dst_host_same_srv_rate", rate(-0.1, 0.3))
        put("dst_host_serror_rate", rate(0.6, 1.2))
        put("dst_host_srv_serror_rate", rate(0.6, 1.2))
        put("wrong_fragment", float(rng.random() < 0.05) * 3)
    elif cat == "probe":
        proto = rng.choice(["tcp", "udp", "icmp"], p=[0.6, 0.1, 0.3])
        service = rng.choice(["private", "eco_i", "other", "finger", "auth", "urp_i"],
                             p=[0.4, 0.25, 0.15, 0.1, 0.05, 0.05])
        flag = rng.choice(["REJ", "SF", "RSTR", "SH", "S0"], p=[0.35, 0.35, 0.15, 0.1, 0.05])
        put("src_bytes", round(rng.lognormal(1.5, 1.0)))
        put("count", rng.integers(1, 200))
        put("srv_count", rng.integers(1, 10))
        put("rerror_rate", rate(0.3, 1.1))
        put("srv_rerror_rate", rate(0.3, 1.1))
        put("diff_srv_rate", rate(0.4, 1.1))
        put("same_srv_rate", rate(-0.1, 0.4))
        put("dst_host_count", rng.integers(1, 256))
        put("dst_host_srv_count", rng.integers(1, 20))
        put("dst_host_diff_srv_rate", rate(0.3, 1.1))
        put("dst_host_same_src_port_rate", rate(0.3, 1.1))
        put("dst_host_rerror_rate", rate(0.3, 1.1))
    elif cat == "r2l":
        proto = "tcp"
        service = rng.choice(["ftp_data", "ftp", "telnet", "imap4", "pop_3"], p=[0.5, 0.2, 0.15, 0.1, 0.05])
        flag = rng.choice(["SF", "RSTO"], p=[0.85, 0.15])
        put("duration", rng.integers(0, 5000))
        put("src_bytes", round(rng.lognormal(8.0, 1.5)))
        put("hot", rng.integers(0, 28))
        put("num_failed_logins", float(rng.random() < 0.3))
        put("is_guest_login", float(rng.random() < 0.6))
        put("logged_in", float(rng.random() < 0.7))
        put("count", rng.integers(1, 5))
        put("srv_count", rng.integers(1, 5))
        put("same_srv_rate", 1.0)
        put("dst_host_count", rng.integers(1, 50))
        put("dst_host_srv_count", rng.integers(1, 50))
        put("dst_host_same_src_port_rate", rate(0.0, 1.0))
    else:
        proto = "tcp"
        service = rng.choice(["telnet", "ftp_data", "ftp"], p=[0.7, 0.2, 0.1])
        flag = "SF"
        put("duration", rng.integers(0, 300))
        put("src_bytes", round(rng.lognormal(7.0, 1.5)))
        put("dst_bytes", round(rng.lognormal(8.0, 1.5)))
        put("hot", rng.integers(0, 5))
        put("root_shell", float(rng.random() < 0.6))
        put("num_file_creations", rng.integers(0, 5))
        put("num_shells", float(rng.random() < 0.3))
        put("logged_in", 1.0)
        put("count", rng.integers(1, 3))
        put("srv_count", rng.integers(1, 3))
        put("same_srv_rate", 1.0)
        put("dst_host_count", rng.integers(1, 30))
        put("dst_host_srv_count", rng.integers(1, 30))
    # the rates that were not set stay 0; num_outbound_cmds is constant like in the real data
    put("srv_diff_host_rate", rate(-0.3, 0.3))
    put("dst_host_srv_diff_host_rate", rate(-0.3, 0.2))
    return str(proto), str(service), str(flag), x


def generate_records(n, seed=0, overlap=0.01):
    """``overlap`` is the chance that a record's features follow another category's profile."""
    rng = np.random.default_rng(seed)
    cats = [c for c, _ in _MIX]
    probs = np.array([p for _, p in _MIX])
    drawn = rng.choice(len(cats), size=n, p=probs / probs.sum())
    records = []
    for k in drawn:
        cat = cats[k]
        shape = cats[rng.integers(len(cats))] if rng.random() < overlap else cat
        proto, service, flag, x = _profile(shape, rng)
        label = _NAMES[cat][rng.integers(len(_NAMES[cat]))]
        records.append(RawRecord(tuple(float(v) for v in x), proto, service, flag,
                                 label, int(rng.integers(1, 22))))
    return records


def write_nslkdd(path, n, seed=0, overlap=0.01):
    recs = generate_records(n, seed, overlap)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in recs:
            fh.write(format_record(rec) + "\n")
    return recs

