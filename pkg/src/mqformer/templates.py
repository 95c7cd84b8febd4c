"""Instruction template registry for the generative stage.

The leading image marker of each template is dropped: soft visual tokens
are always prepended to the instruction, so the marker carries no extra
information. Placeholders: ``{Question}``, ``{Tag}``, ``{Bbox}``,
``{Option}`` and ``{TagBbox}`` (a tag word followed by its box).
"""

TEMPLATES = {
    "caption": (
        "Write a short description for the image.",
        "Write a description for the image.",
        "Provide a description of what is presented in the photo.",
        "Briefly describe the content of the image.",
        "Look at the image and describe what you see in a simple and clear manner.",
        "Could you use a few words to describe what you perceive in the photo?",
        "Please provide a short depiction of the picture.",
        "Summarize what this image depicts in a simple and concise manner.",
        "Provide a simple and clear description of the image, suitable for all audiences.",
    ),
    "vqa": (
        "{Question}",
        "Question: {Question}",
        "Question: {Question} Answer:",
        "Given the image, answer the following question: {Question}",
        "With the aid of the following image, offer a straightforward, short response to: {Question}.",
        "Based on the image, respond to this question with a short answer: {Question}. Answer:",
        "Use the provided image to answer the question as short as possible: {Question}",
        "What is the answer to the following question? {Question}",
        "Refer to the information in the image to provide a minimalist answer to: {Question}",
    ),
    "textvqa": (
        "Question: {Question}",
        "Question: {Question} Answer:",
        "Analyze the textual content in this image and provide a short answer to: {Question}.",
        "Look at the text in the image provided and succinctly answer: {Question}.",
        "With the help of text in the following image, offer a simple, short response to: {Question}.",
        "Refer to the textual data in the image to provide a brief answer to: {Question}.",
    ),
    "grounded_caption": (
        "Write a description for the target object in the image.",
        "Provide a short caption focusing on the highlighted object in this image.",
        "Describe the specific object indicated in the following image, keeping the description brief.",
        "Explain what the object marked in the image is, using a concise description.",
        "Identify and describe the key object in this image, using a short and clear description.",
    ),
    "rec": (
        "In the given image, could you find and tell me the coordinates of {Tag}?",
        "In the coordinate {Bbox} of the image, can you observe the object {Tag}.",
        "Locate the {Tag} in this image and provide a brief description of its position.",
        "Confirm the presence of {Tag} in the bounding box {Bbox} in the image.",
        "Search for {Tag} in the image and give its coordinates if found.",
        "Can you find the spatial location or coordinates of {Tag} in the image shown here?",
    ),
    "ref_dialogue": (
        "Focus on the object {TagBbox} in the image, and answer the question: {Question}.",
        "Could you provide a descriptive caption for the object {TagBbox} in the image?",
        "Regarding the object specified as {TagBbox}, please respond to: {Question}.",
        "Explain the features or details of the object identified by {TagBbox} in the image.",
        "Create a caption that describes the area or object marked as {TagBbox} in the image.",
        "Refer to the object {TagBbox} in the image, and provide an answer to: {Question}.",
    ),
    "mc_vqa": (
        "Question: {Question} Options: {Option}. Answer:",
        "For the question: {Question}, choose the most suitable answer from options: {Option}.",
        "Examine the image and answer the question: {Question}. Your choices are: {Option}.",
        "Respond to the question: {Question} among options: {Option}, select your response:",
        "Consider the question: {Question} and options: {Option}. Please provide your answer:",
    ),
}

TASKS = tuple(TEMPLATES)

# Fixed words the response generators emit beyond scene vocabulary.
RESPONSE_WORDS = ("yes", "no", "on", "the", "a", "b", "c", "d")


def template_ids(task: str) -> list:
    if task not in TEMPLATES:
        raise KeyError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    return [f"{task}/{i}" for i in range(len(TEMPLATES[task]))]


def lookup(template_id: str) -> str:
    task, _, index = template_id.partition("/")
    return TEMPLATES[task][int(index)]
