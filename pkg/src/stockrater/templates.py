import logging
from functools import lru_cache
from pathlib import Path
from typing import Any

from jinja2 import ChoiceLoader, Environment, FileSystemLoader, PackageLoader, StrictUndefined, select_autoescape

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def get_environment(template_dir: Path | None = None) -> Environment:
    """
    Templates in template_dir override the bundled ones of the same name.
    """
    loaders = []
    if template_dir is not None:
        logger.info("Loading prompt template overrides from: %s", template_dir)
        loaders.append(FileSystemLoader(str(template_dir)))
    loaders.append(PackageLoader("stockrater", "resources/templates"))
    return Environment(
        loader=ChoiceLoader(loaders),
        autoescape=select_autoescape(enabled_extensions=("html",), default_for_string=False, default=False),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )


def render(name: str, template_dir: Path | None = None, **context: Any) -> str:
    return get_environment(template_dir).get_template(name).render(**context)
