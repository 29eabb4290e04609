import os
import requests

from typing import Dict, List, Optional, Sequence

from .log_util import logger
from .file_util import atomic_open
from .error_util import ConfigError, DataError

__all__ = [
    "EWT_SPLITS",
    "EWT_SENTENCE_COUNTS",
    "get_ewt_url",
    "download_ewt",
]

EWT_BASE_URL = "https://raw.githubusercontent.com/UniversalDependencies/UD_English-EWT/r2.2"
EWT_SPLITS = ("train", "dev", "test")
# Reference split sizes of the release used for probing.
EWT_SENTENCE_COUNTS: Dict[str, int] = {"train": 12543, "dev": 2002, "test": 2077}

def get_ewt_url(split: str, base_url: Optional[str]=None) -> str:
    """
    Gets the download URL of an English-EWT split. The base URL can be
    overridden with `ORTHO_PROBE_EWT_URL`.

    >>> get_ewt_url("dev", base_url="https://example.org/ewt/")
    'https://example.org/ewt/en_ewt-ud-dev.conllu'
    """
    if split not in EWT_SPLITS:
        raise ConfigError("split", f"Invalid split `{split}`, expected one of {', '.join(EWT_SPLITS)}")
    if base_url is None:
        base_url = os.getenv("ORTHO_PROBE_EWT_URL", EWT_BASE_URL)
    return f"{base_url.rstrip('/')}/en_ewt-ud-{split}.conllu"

def download_ewt(
    directory: str,
    splits: Sequence[str]=EWT_SPLITS,
    overwrite: bool=False,
    timeout: float=60.0
) -> List[str]:
    """
    Downloads English-EWT CoNLL-U splits into a directory.

    :param directory: The destination directory, created if missing.
    :param splits: The splits to fetch.
    :param overwrite: Replace files that already exist.
    :return: The paths of the CoNLL-U files.
    :raises DataError: When a download fails.
    """
    paths = []
    for split in splits:
        url = get_ewt_url(split)
        path = os.path.join(directory, f"en_ewt-ud-{split}.conllu")
        paths.append(path)
        if os.path.exists(path) and not overwrite:
            logger.info(f"{path} already exists, skipping download")
            continue

        logger.info(f"Downloading {url}")
        try:
            response = requests.get(url, timeout=timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            raise DataError(f"Could not download {split} split from {url}: {e}") from e

        with atomic_open(path, binary=True) as f:
            f.write(response.content)
        logger.info(f"Wrote {path}")
    return paths
