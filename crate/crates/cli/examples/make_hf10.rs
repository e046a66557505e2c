//! Regenerates `fixtures/hf10`: a 23-task model-hub graph, eleven samples
//! (one in-context example plus ten test requests), an `EMB1` cache, and the
//! replay file recorded from a scripted responder.
//!
//! cargo run -p taskplan-cli --example make_hf10 -- crates/cli/fixtures/hf10

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use taskplan_cli::commands::Planner;
use taskplan_cli::config::RunConfig;
use taskplan_cli::runtime::{decoding_params, node_texts, Workspace};
use taskplan_core::embed::{l2_norm, write_cache, HashEmbedder};
use taskplan_core::llm::MockResponder;
use taskplan_core::{EmbeddingMatrix, LlmClient};

const TEXT: &str = "text";
const IMAGE: &str = "image";
const AUDIO: &str = "audio";
const VIDEO: &str = "video";

/// (name, description, inputs, output)
const TASKS: [(&str, &str, &[&str], &str); 23] = [
    ("Token Classification", "Token classification assigns a label, such as a named entity type, to each token of a text.", &[TEXT], TEXT),
    ("Translation", "Translation is the task of converting text from one language to another.", &[TEXT], TEXT),
    ("Summarization", "Summarization produces a shorter version of a document while keeping its important information.", &[TEXT], TEXT),
    ("Question Answering", "Question answering extracts the answer to a question from a given text.", &[TEXT], TEXT),
    ("Conversational", "Conversational response modelling generates a relevant reply in a dialogue.", &[TEXT], TEXT),
    ("Text Generation", "Text generation writes new text that continues or answers a prompt.", &[TEXT], TEXT),
    ("Sentence Similarity", "Sentence similarity scores how close the meanings of two texts are.", &[TEXT], "score"),
    ("Tabular Classification", "Tabular classification predicts a category from a table shown in an image.", &[IMAGE], TEXT),
    ("Object Detection", "Object detection locates and labels the objects in an image and returns the annotated image.", &[IMAGE], IMAGE),
    ("Image Classification", "Image classification assigns a label to a whole image.", &[IMAGE], TEXT),
    ("Image-to-Image", "Image-to-image transforms a source image into a target image, for example a sketch into a photo.", &[IMAGE], IMAGE),
    ("Image-to-Text", "Image-to-text generates a caption describing the content of an image.", &[IMAGE], TEXT),
    ("Text-to-Image", "Text-to-image generates an image that matches a text description.", &[TEXT], IMAGE),
    ("Text-to-Video", "Text-to-video generates a video clip from a text description.", &[TEXT], VIDEO),
    ("Visual Question Answering", "Visual question answering answers a question about an image.", &[IMAGE, TEXT], TEXT),
    ("Document Question Answering", "Document question answering answers a question about a scanned document image.", &[IMAGE, TEXT], TEXT),
    ("Image Segmentation", "Image segmentation divides an image into labelled regions and returns the mask image.", &[IMAGE], IMAGE),
    ("Depth Estimation", "Depth estimation predicts the distance of every pixel and returns a depth map image.", &[IMAGE], IMAGE),
    ("Text-to-Speech", "Text-to-speech converts written text into natural sounding spoken audio.", &[TEXT], AUDIO),
    ("Automatic Speech Recognition", "Automatic speech recognition transcribes spoken audio into text.", &[AUDIO], TEXT),
    ("Audio-to-Audio", "Audio-to-audio enhances or separates sources in an audio recording.", &[AUDIO], AUDIO),
    ("Audio Classification", "Audio classification assigns a label, such as the sound event, to an audio clip.", &[AUDIO], TEXT),
    ("Image Editing", "Image editing modifies an image according to a text instruction.", &[IMAGE, TEXT], IMAGE),
];

/// Consumers of the similarity score.
const SCORE_READERS: [&str; 5] = ["Conversational", "Text Generation", "Summarization", "Question Answering", "Translation"];

/// (id, request, [(step, task)])
const SAMPLES: [(&str, &str, &[(&str, &str)]); 11] = [
    ("ex0", "Translate the French caption in 'menu.txt' into English and read it aloud.", &[
        ("Translate the French caption into English", "Translation"),
        ("Read the English caption aloud", "Text-to-Speech"),
    ]),
    ("hf01", "Generate an image of a girl reading a book under a tree, then describe the new image with your voice.", &[
        ("Generate an image of a girl reading a book under a tree", "Text-to-Image"),
        ("Describe the generated image in a sentence", "Image-to-Text"),
        ("Speak the description aloud", "Text-to-Speech"),
    ]),
    ("hf02", "Transcribe 'meeting.wav', summarize what was decided, and translate the summary into German.", &[
        ("Transcribe the speech in meeting.wav", "Automatic Speech Recognition"),
        ("Summarize the decisions in the transcript", "Summarization"),
        ("Translate the summary into German", "Translation"),
    ]),
    ("hf03", "Find the cars in 'street.jpg' and tell me in words what the annotated picture shows.", &[
        ("Detect the cars in street.jpg", "Object Detection"),
        ("Caption the annotated picture", "Image-to-Text"),
    ]),
    ("hf04", "Estimate the depth of 'room.png', split the depth map into regions, and classify the result.", &[
        ("Estimate the depth map of room.png", "Depth Estimation"),
        ("Segment the depth map into regions", "Image Segmentation"),
        ("Classify the segmented image", "Image Classification"),
    ]),
    ("hf05", "From the scan 'contract.png', find out how many pages are signed and read the answer aloud.", &[
        ("Answer how many pages are signed in contract.png", "Document Question Answering"),
        ("Read the answer aloud", "Text-to-Speech"),
    ]),
    ("hf06", "Remove the background noise from 'voice.flac' and then tell me what kind of sound it is.", &[
        ("Remove the background noise from voice.flac", "Audio-to-Audio"),
        ("Classify the kind of sound in the cleaned audio", "Audio Classification"),
    ]),
    ("hf07", "Write a short story about a lighthouse keeper and turn it into a video.", &[
        ("Write a short story about a lighthouse keeper", "Text Generation"),
        ("Turn the story into a video", "Text-to-Video"),
    ]),
    ("hf08", "Edit 'cat.jpg' so the cat wears a hat, then check whether the hat is red.", &[
        ("Edit cat.jpg so the cat wears a hat", "Image Editing"),
        ("Answer whether the hat in the edited image is red", "Visual Question Answering"),
    ]),
    ("hf09", "List the people and places in my paragraph, summarize it, and draw a picture of the summary.", &[
        ("Extract the people and places from the paragraph", "Token Classification"),
        ("Summarize the paragraph", "Summarization"),
        ("Draw a picture of the summary", "Text-to-Image"),
    ]),
    ("hf10", "Turn 'sketch.png' into a realistic photo, caption it, and translate the caption into Spanish.", &[
        ("Turn sketch.png into a realistic photo", "Image-to-Image"),
        ("Caption the realistic photo", "Image-to-Text"),
        ("Translate the caption into Spanish", "Translation"),
    ]),
];

/// Samples whose direct answer swaps one task for a name outside the graph.
const DIRECT_SLIPS: [(&str, &str); 3] = [("hf02", "Speech-to-Text"), ("hf04", "Depth Segmentation"), ("hf09", "Image Generation")];

fn graph_json() -> serde_json::Value {
    let nodes: Vec<_> = TASKS
        .iter()
        .map(|(n, d, _, _)| serde_json::json!({ "id": n, "desc": d }))
        .collect();
    let mut links = Vec::new();
    for (a, _, _, out) in TASKS.iter() {
        for (b, _, inputs, _) in TASKS.iter() {
            let feeds = if *out == "score" { SCORE_READERS.contains(b) } else { inputs.contains(out) };
            if a != b && feeds {
                let kind = if *out == "score" { "temporal" } else { "resource" };
                links.push(serde_json::json!({ "source": a, "target": b, "type": kind }));
            }
        }
    }
    serde_json::json!({ "nodes": nodes, "links": links })
}

fn samples_jsonl() -> String {
    let mut out = String::new();
    for (id, request, pairs) in SAMPLES.iter() {
        let rec = serde_json::json!({
            "id": id,
            "user_request": request,
            "task_steps": pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
            "task_nodes": pairs.iter().map(|p| serde_json::json!({ "task": p.1 })).collect::<Vec<_>>(),
            "task_links": pairs.windows(2).map(|w| serde_json::json!({ "source": w[0].1, "target": w[1].1 })).collect::<Vec<_>>(),
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

/// Node descriptions embed with the hash embedder; each step embeds as its
/// task's description vector plus a smaller step-specific component, so
/// retrieval is informative but not exact.
fn embedding_cache(ws: &Workspace, dim: usize, seed: u64) -> (EmbeddingMatrix, Vec<String>) {
    let hash = HashEmbedder::new(dim, seed);
    let mut texts = node_texts(&ws.graph);
    let mut rows: Vec<Vec<f64>> = texts.iter().map(|t| hash.vector(t)).collect();
    for (_, _, pairs) in SAMPLES.iter() {
        for (step, task) in pairs.iter() {
            let base = hash.vector(&ws.graph.nodes()[ws.graph.id_of(task).expect("task")].description);
            let noise = hash.vector(step);
            let v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + 0.6 * n).collect();
            let norm = l2_norm(&v);
            texts.push(step.to_string());
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    (EmbeddingMatrix::from_rows(&rows).expect("rows"), texts)
}

fn section<'a>(prompt: &'a str, start: usize, end: &str) -> Option<&'a str> {
    let rest = &prompt[start..];
    Some(rest[..rest.find(end).unwrap_or(rest.len())].trim())
}

/// The body under the last `header`; in-context examples come first.
fn after_last<'a>(prompt: &'a str, header: &str, end: &str) -> Option<&'a str> {
    section(prompt, prompt.rfind(header)? + header.len(), end)
}

fn after_first<'a>(prompt: &'a str, header: &str, end: &str) -> Option<&'a str> {
    section(prompt, prompt.find(header)? + header.len(), end)
}

fn scripted_response(prompt: &str) -> Option<String> {
    let by_request = |req: &str| SAMPLES.iter().find(|s| s.1 == req);
    let by_step = |step: &str| SAMPLES.iter().flat_map(|s| s.2.iter()).find(|p| p.0 == step).map(|p| p.1);
    if prompt.starts_with("# TASK LIST #") && prompt.contains("task invocation graph") {
        let (id, _, pairs) = by_request(after_last(prompt, "# USER REQUEST #\n", "\n\nNow")?)?;
        let slip = DIRECT_SLIPS.iter().find(|s| s.0 == *id).map(|s| s.1);
        let mut tasks: Vec<&str> = pairs.iter().map(|p| p.1).collect();
        if let Some(bad) = slip {
            if let Some(last) = tasks.last_mut() {
                *last = bad;
            }
        }
        let v = serde_json::json!({
            "task_steps": pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
            "task_nodes": tasks.iter().map(|t| serde_json::json!({ "task": t, "arguments": [] })).collect::<Vec<_>>(),
            "task_links": tasks.windows(2).map(|w| serde_json::json!({ "source": w[0], "target": w[1] })).collect::<Vec<_>>(),
        });
        return Some(v.to_string());
    }
    if prompt.starts_with("# TASK LIST #") {
        let (_, _, pairs) = by_request(after_last(prompt, "# USER REQUEST #\n", "\n\nNow")?)?;
        return Some(serde_json::json!({ "task_steps": pairs.iter().map(|p| p.0).collect::<Vec<_>>() }).to_string());
    }
    if prompt.starts_with("# CANDIDATE TASK LIST #") {
        let list: Vec<serde_json::Value> = serde_json::from_str(after_first(prompt, "# CANDIDATE TASK LIST #\n", "\n\n# GOAL")?).ok()?;
        let truth = by_step(after_last(prompt, "# STEP #\n", "\n\nNow")?)?;
        let names: Vec<&str> = list.iter().filter_map(|c| c["id"].as_str()).collect();
        // One plausible decoy per step keeps adaptive and beam search honest.
        let decoy = names.iter().find(|n| **n != truth).copied();
        let scores: BTreeMap<&str, u8> = names
            .iter()
            .map(|&n| (n, if n == truth { 5 } else if Some(n) == decoy { 3 } else { 1 }))
            .collect();
        return Some(serde_json::to_string(&scores).ok()?);
    }
    if prompt.starts_with("# GOAL #\nBased on the provided # USER REQUEST # and initially inferred # STEPS #") {
        let (_, _, pairs) = by_request(after_last(prompt, "# USER REQUEST #\n", "\n\n# STEPS")?)?;
        let lists: Vec<Vec<String>> = serde_json::from_str(after_last(prompt, "# SOLUTION LIST #\n", "\n\nNow")?).ok()?;
        let target: Vec<&str> = pairs.iter().map(|p| p.1).collect();
        let pick = lists.iter().max_by_key(|l| l.iter().zip(&target).filter(|(a, b)| a == *b).count())?;
        return Some(serde_json::json!({ "best_solution": pick }).to_string());
    }
    None
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/cli/fixtures/hf10".into()));
    std::fs::create_dir_all(&dir).expect("fixture dir");
    let write = |name: &str, body: &str| {
        let path: PathBuf = dir.join(name);
        taskplan_core::write_atomic(&path, body.as_bytes()).expect("write");
    };
    write("graph.json", &(serde_json::to_string_pretty(&graph_json()).unwrap() + "\n"));
    write("samples.jsonl", &samples_jsonl());

    let cfg = RunConfig::load(&dir.join("run.toml")).expect("run.toml");
    let ws = Workspace::open(cfg).expect("workspace");
    let (m, texts) = embedding_cache(&ws, ws.cfg.embed.dim, ws.cfg.embed.seed);
    write_cache(ws.cfg.embed.cache.as_ref().expect("cache path"), &m, &texts).expect("cache");

    let replay: &Path = ws.cfg.llm.replay.as_deref().expect("replay path");
    let _ = std::fs::remove_file(replay);
    let client = LlmClient::mock(MockResponder::new().with_fallback(scripted_response), decoding_params(&ws.cfg))
        .with_recorder(replay)
        .expect("recorder");
    let embedder = taskplan_cli::runtime::build_embedder(&ws.cfg).expect("embedder");
    let planner = Planner::new(&ws, &client, embedder.as_ref()).expect("planner");
    let (_, test) = ws.split().expect("split");
    for strategy in ws.cfg.eval_strategies() {
        let h = planner.representations(strategy).expect("representations");
        for s in &test {
            planner.plan(strategy, h.as_ref(), &s.request).expect("plan");
        }
    }
    println!("wrote fixture to {}", dir.display());
}
