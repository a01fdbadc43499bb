use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Color, Complexity, SceneObject, SceneSpec, Shape, Style};
use super::vocab::Vocabulary;
use crate::error::Result;

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn position_phrase(cell: (usize, usize)) -> String {
    let row = ["top", "center", "bottom"][cell.0];
    let col = ["left", "center", "right"][cell.1];
    if cell == (1, 1) {
        "in the center".to_string()
    } else {
        format!("in the {row} {col}")
    }
}

fn object_phrase(obj: &SceneObject, rng: &mut ChaCha8Rng, with_position: bool) -> String {
    let mut words = Vec::new();
    if rng.random_bool(0.7) {
        words.push(obj.size.word());
    }
    words.push(obj.color.word());
    words.push(obj.shape.word());
    let mut s = format!("{} {}", article(words[0]), words.join(" "));
    if with_position {
        s.push(' ');
        s.push_str(&position_phrase(obj.cell));
    }
    s
}

fn style_phrase(style: Style) -> Option<&'static str> {
    match style {
        Style::Plain => None,
        Style::Night => Some("at night, moonlit"),
        Style::Sunset => Some("at sunset, warm glow"),
        Style::Foggy => Some("under a foggy sky, dramatic lighting"),
    }
}

/// Caption text for a scene; the phrasing varies with `seed`.
pub fn caption_text(spec: &SceneSpec, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = match spec.complexity {
        Complexity::Simple => {
            let with_position = rng.random_bool(0.3);
            let obj = object_phrase(&spec.objects[0], &mut rng, with_position);
            if rng.random_bool(0.2) {
                format!("a picture of {obj}")
            } else {
                obj
            }
        }
        Complexity::Complex => {
            let phrases: Vec<String> = spec
                .objects
                .iter()
                .map(|o| object_phrase(o, &mut rng, false))
                .collect();
            let (last, init) = phrases.split_last().expect("complex scenes have objects");
            let sep = if init.len() == 1 { " and" } else { ", and" };
            format!("{}{sep} {last}", init.join(", "))
        }
    };
    match style_phrase(spec.style) {
        Some(p) => {
            text.push(' ');
            text.push_str(p);
        }
        None => {
            if rng.random_bool(0.5) {
                text.push_str(&format!(" on {} {} background", article(spec.background.word()), spec.background.word()));
            }
        }
    }
    text
}

/// Tokenized caption for a scene.
pub fn caption_scene(spec: &SceneSpec, seed: u64, vocab: &Vocabulary) -> Result<Vec<u16>> {
    vocab.encode(&caption_text(spec, seed))
}

/// Recovers the (color, shape) pairs a caption mentions, in order.
pub fn parse_caption(ids: &[u16], vocab: &Vocabulary) -> Result<Vec<(Color, Shape)>> {
    let mut out = Vec::new();
    let mut color = None;
    for &id in ids {
        let w = vocab.word(id)?;
        if let Some(c) = Color::from_word(w) {
            color = Some(c);
        } else if let Some(s) = Shape::from_word(w) {
            if let Some(c) = color.take() {
                out.push((c, s));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::scene::gen_scene_spec;
    use super::*;

    #[test]
    fn simple_caption_names_one_shape() {
        let vocab = Vocabulary::default();
        for seed in 0..100 {
            let spec = gen_scene_spec(seed, Complexity::Simple);
            let ids = caption_scene(&spec, seed, &vocab).unwrap();
            let shapes = ids
                .iter()
                .filter(|&&i| Shape::from_word(vocab.word(i).unwrap()).is_some())
                .count();
            assert_eq!(shapes, 1, "{}", caption_text(&spec, seed));
        }
    }

    #[test]
    fn foggy_caption_has_fog_phrase() {
        let vocab = Vocabulary::default();
        let mut seen = 0;
        for seed in 0..200 {
            let spec = gen_scene_spec(seed, Complexity::Complex);
            if spec.style == Style::Foggy {
                seen += 1;
                let text = vocab.decode(&caption_scene(&spec, seed, &vocab).unwrap()).unwrap();
                assert!(text.contains("under a foggy sky, dramatic lighting"), "{text}");
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn captions_are_faithful_and_decode() {
        let vocab = Vocabulary::default();
        for seed in 0..300 {
            for complexity in [Complexity::Simple, Complexity::Complex] {
                let spec = gen_scene_spec(seed, complexity);
                let ids = caption_scene(&spec, seed + 1, &vocab).unwrap();
                assert_eq!(caption_scene(&spec, seed + 1, &vocab).unwrap(), ids);
                for &id in &ids {
                    assert_eq!(vocab.id(vocab.word(id).unwrap()), Some(id));
                }
                let pairs = parse_caption(&ids, &vocab).unwrap();
                let expected: Vec<_> = spec.objects.iter().map(|o| (o.color, o.shape)).collect();
                assert_eq!(pairs, expected, "{}", caption_text(&spec, seed + 1));
                assert!(ids.len() <= 32);
            }
        }
    }

    #[test]
    fn list_punctuation() {
        let spec = gen_scene_spec(11, Complexity::Complex);
        let text = caption_text(&spec, 0);
        match spec.objects.len() {
            2 => assert!(!text.contains(", and")),
            _ => assert!(text.contains(", and")),
        }
    }
}
