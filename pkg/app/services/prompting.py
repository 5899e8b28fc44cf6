"""
Prompt assembly for node-level elicitation

Each prompt shows only the target variable and its direct parents, plus the
shared persona and phenomenon overview.
"""
import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache

from config import PROMPT_TEMPLATE_FILE
from app.services.dag_model import UnknownNodeError, parents
from app.services.equation import format_equation, format_number

logger = logging.getLogger(__name__)

PLACEHOLDERS = (
    'persona', 'phenomenon', 'target_block', 'parent_blocks',
    'template_equation', 'format_instructions', 'feedback',
)

FORMAT_INSTRUCTIONS = (
    'Respond with one JSON object. First write your reasoning in the "thoughts" field, '
    'then give the final equation as a single string in the "proposed_lin_str_eq" field:\n'
    '{"thoughts": "<your reasoning>", "proposed_lin_str_eq": "<equation>"}'
)

NO_PARENTS_TEXT = '(none: this variable has no parents in the DAG)'


class PromptTemplateError(Exception):
    pass


@dataclass(frozen=True)
class PromptBundle:
    target: str
    system_text: str
    user_text: str
    attempt_index: int = 1

    def sha256(self):
        digest = hashlib.sha256()
        digest.update(self.system_text.encode('utf-8'))
        digest.update(b'\x00')
        digest.update(self.user_text.encode('utf-8'))
        return digest.hexdigest()


@lru_cache(maxsize=8)
def load_template(path=PROMPT_TEMPLATE_FILE):
    """
    Read a prompt template with [system] and [user] sections

    Returns:
        Tuple of (system_template, user_template)
    """
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()

    sections = {}
    current = None
    for line in text.splitlines(keepends=True):
        header = line.strip()
        if header in ('[system]', '[user]'):
            current = header[1:-1]
            sections[current] = []
            continue
        if current is None:
            if header:
                raise PromptTemplateError(f"{path}: text before the first section header")
            continue
        sections[current].append(line)

    if set(sections) != {'system', 'user'}:
        raise PromptTemplateError(f"{path}: expected [system] and [user] sections")
    return ''.join(sections['system']).strip(), ''.join(sections['user']).strip()


def _render(template, values):
    try:
        return template.format_map(values)
    except KeyError as e:
        raise PromptTemplateError(f"Unknown placeholder {e} in prompt template") from e


def _variable_block(meta):
    return (
        f"- {meta.id} ({meta.display_name}): {meta.description}\n"
        f"  Unit: {meta.unit}. Allowed range: {meta.bounds}."
    )


def template_equation(target, parent_ids):
    terms = [f"b{i}*{parent}" for i, parent in enumerate(parent_ids, start=1)]
    return ' + '.join([f"{target} = b0", *terms, 'N(0, sigma^2)'])


def build_prompt(dag, target, attempt_index=1, feedback='', template_path=PROMPT_TEMPLATE_FILE):
    """
    Build the three-part elicitation prompt for one parent-child structure

    Args:
        dag: DagSpec
        target: Node id to parameterize
        attempt_index: 1-based attempt number within the feedback loop
        feedback: Addendum from build_feedback_addendum (empty on attempt 1)
        template_path: Prompt template file

    Returns:
        PromptBundle
    """
    if target not in dag.variables:
        raise UnknownNodeError(f"Unknown target {target!r} in DAG {dag.name}")

    parent_ids = sorted(parents(dag, target))
    system_template, user_template = load_template(template_path)

    values = {
        'persona': dag.persona,
        'phenomenon': dag.phenomenon_overview,
        'target_block': _variable_block(dag.variables[target]),
        'parent_blocks': '\n'.join(_variable_block(dag.variables[p]) for p in parent_ids) or NO_PARENTS_TEXT,
        'template_equation': template_equation(target, parent_ids),
        'format_instructions': FORMAT_INSTRUCTIONS,
        'feedback': feedback,
    }

    return PromptBundle(
        target=target,
        system_text=_render(system_template, values),
        user_text=_render(user_template, values).rstrip() + '\n',
        attempt_index=attempt_index,
    )


def _describe_error(error):
    code = getattr(error, 'code', None)
    span = getattr(error, 'span', None)
    if code and span:
        fragment = getattr(error, 'fragment', '')
        where = f" at characters {span[0]}-{span[1]}" + (f" ({fragment!r})" if fragment else '')
        return f"- {code}{where}: {error.message}"
    return f"- {error}"


def build_feedback_addendum(previous, c1, c2, parse_errors=None, previous_text=None):
    """
    Explain why the last proposal was rejected

    Args:
        previous: Last parsed StructuralEquation (None after a parse failure)
        c1: Interval produced by the previous equation (None after a parse failure)
        c2: Hard bounds of the target
        parse_errors: Errors raised while reading the previous response
        previous_text: Raw equation string, quoted when it could not be parsed

    Returns:
        Feedback text appended to the next prompt
    """
    lines = ['', 'Feedback on your previous proposal:']

    if previous is not None:
        lines.append(f"  {format_equation(previous)}")
    elif previous_text:
        lines.append(f"  {previous_text}")

    if parse_errors:
        lines.append('It could not be used because of the following problem(s):')
        lines.extend(_describe_error(e) for e in parse_errors)
        lines.append('Variables that are not allowed here must not appear in the equation.')

    if c1 is not None:
        target = previous.target if previous is not None else 'the target'
        lines.append(
            f"Over the parents' ranges this equation produces values in C1 = {c1}, "
            f"but {target} must stay within C2 = {c2}."
        )
        if c1.lo < c2.lo:
            lines.append(
                f"- The lower endpoint {format_number(c1.lo)} is below the lower bound {format_number(c2.lo)}."
            )
        if c1.hi > c2.hi:
            lines.append(
                f"- The upper endpoint {format_number(c1.hi)} exceeds the upper bound {format_number(c2.hi)}."
            )

    lines.append(
        f"Revise the equation so that its whole range fits inside {c2}, "
        'and answer again in the same JSON format.'
    )
    return '\n'.join(lines)
