import threading

tls = threading.local()


def worker_or_none():
    return getattr(tls, "worker", None)
