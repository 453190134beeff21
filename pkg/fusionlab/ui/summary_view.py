from typing import List, Sequence, Tuple

from prompt_toolkit import print_formatted_text
from prompt_toolkit.formatted_text import FormattedText, HTML
from prompt_toolkit.styles import Style

from ..core.evalkit import Table
from .artifacts import format_cell


class SummaryView:
    """Box-drawn console rendering of result tables"""

    def __init__(self, output=None):
        self.output = output
        self._setup_styles()

    def _setup_styles(self):
        """Setup UI styles"""
        self.style = Style.from_dict({
            'border': '#666666',
            'title': 'bold #ffffff',
            'header': 'bold #00aaaa',
            'value': '#dddddd',
            'missing': '#888888',
            'ok': '#00aa00 bold',
            'error': '#ff0000 bold',
            'timestamp': '#0000ff',
            'message': '#00aa00',
        })

    def _print(self, text):
        kwargs = {'style': self.style}
        if self.output is not None:
            kwargs['output'] = self.output
        print_formatted_text(text, **kwargs)

    def _get_table_text(self, title: str, table: Table) -> List[Tuple[str, str]]:
        """Generate the formatted table text"""
        cells = [[format_cell(v) for v in row] for row in table.rows]
        widths = [len(h) for h in table.header]
        for row in cells:
            widths = [max(w, len(c)) for w, c in zip(widths, row)]
        inner = sum(widths) + 3 * len(widths) - 1

        text = [
            ("", "\n"),
            ("class:title", f"  {title} "),
            ("", "\n"),
            ("", "  "),
            ("class:border", "╭" + "─" * inner + "╮"),
            ("", "\n"),
            ("", "  "),
            ("class:border", "│"),
        ]
        for h, w in zip(table.header, widths):
            text.extend([("class:header", f" {h:<{w}} "), ("class:border", "│")])
        text.extend([
            ("", "\n"),
            ("", "  "),
            ("class:border", "├" + "─" * inner + "┤"),
            ("", "\n"),
        ])
        if not cells:
            text.extend([
                ("", "  "),
                ("class:border", "│"),
                ("class:missing", f" {'no rows':<{inner - 2}} "),
                ("class:border", "│"),
                ("", "\n"),
            ])
        for row in cells:
            text.extend([("", "  "), ("class:border", "│")])
            for c, w in zip(row, widths):
                style = "class:missing" if c == 'NA' else "class:value"
                text.extend([(style, f" {c:>{w}} "), ("class:border", "│")])
            text.append(("", "\n"))
        text.extend([
            ("", "  "),
            ("class:border", "╰" + "─" * inner + "╯"),
            ("", "\n"),
        ])
        return text

    def show_table(self, title: str, table: Table):
        self._print(FormattedText(self._get_table_text(title, table)))

    def show_written(self, paths: Sequence):
        text = [("class:title", f"  {len(paths)} file(s) written"), ("", "\n")]
        for p in paths:
            text.extend([("class:border", "    • "), ("class:value", str(p)), ("", "\n")])
        self._print(FormattedText(text))

    def show_error(self, message: str):
        self._print(HTML('<error>error:</error> {}').format(message))

    def show_status(self, ok: bool, message: str):
        tag = 'ok' if ok else 'error'
        self._print(HTML(f'<{tag}>{{}}</{tag}>').format(message))

    def show_debug_log(self, messages: Sequence[Tuple[str, str]]):
        """Print the debug message history"""
        text = [
            ("class:title", "Debug Log "),
            ("class:title", f"({len(messages)} messages)"),
            ("", "\n\n")
        ]
        if not messages:
            text.append(("fg:gray", "No debug messages\n"))
        for timestamp, message in messages:
            text.extend([
                ("class:timestamp", f"[{timestamp}] "),
                ("class:message", f"{message}"),
                ("", "\n")
            ])
        self._print(FormattedText(text))
