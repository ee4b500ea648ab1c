"""
A minimal {{ KEY }} template renderer for generated CUDA sources
"""

# Standard
from typing import Dict
import re

_PLACEHOLDER = re.compile(r"{{\s*(\w+)\s*}}")


class TemplateCompiler:
    """Fill {{ KEY }} placeholders. Values are inserted literally, so C escape
    sequences in them survive untouched.
    """

    def __init__(self, template_content: str):
        self.template_content = template_content

    @property
    def placeholders(self) -> set:
        return set(_PLACEHOLDER.findall(self.template_content))

    def __call__(self, template_dict: Dict[str, str]) -> str:
        missing = self.placeholders - set(template_dict)
        if missing:
            raise KeyError(f"Template values missing for: {sorted(missing)}")
        return _PLACEHOLDER.sub(
            lambda match: template_dict[match.group(1)], self.template_content
        )
