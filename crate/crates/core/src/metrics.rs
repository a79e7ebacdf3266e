//! Evaluation metrics: rendered-image exact match (with and without blank
//! column elimination), BLEU-4, and ROUGE-4.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Renderer;
use crate::segmentation::BinaryMask;
use crate::token::Token;

/// Removes every all-background pixel column.
pub fn delete_blank_columns(mask: &BinaryMask) -> BinaryMask {
    let keep: Vec<usize> = (0..mask.width)
        .filter(|&c| (0..mask.height).any(|r| mask.get(r, c)))
        .collect();
    let mut bits = Vec::with_capacity(mask.height * keep.len());
    for r in 0..mask.height {
        for &c in &keep {
            bits.push(mask.get(r, c));
        }
    }
    BinaryMask {
        height: mask.height,
        width: keep.len(),
        bits,
    }
}

/// True iff both token sequences render to pixel-identical images.
/// A failing prediction render counts as a mismatch; a failing gold render
/// is a hard error.
pub fn match_render(pred: &[Token], gold: &[Token], renderer: &dyn Renderer) -> Result<bool> {
    let gold_img = renderer.render(gold)?;
    match renderer.render(pred) {
        Ok(pred_img) => Ok(pred_img == gold_img),
        Err(_) => Ok(false),
    }
}

/// As [`match_render`], after deleting all blank columns from both images.
pub fn match_ws(pred: &[Token], gold: &[Token], renderer: &dyn Renderer) -> Result<bool> {
    let gold_img = renderer.render(gold)?;
    match renderer.render(pred) {
        Ok(pred_img) => Ok(delete_blank_columns(&pred_img) == delete_blank_columns(&gold_img)),
        Err(_) => Ok(false),
    }
}

fn ngram_counts<'a>(tokens: &'a [Token], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(|t| t.text.as_str()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matched n-gram count and total prediction n-gram count.
fn clipped_counts(pred: &[Token], gold: &[Token], n: usize) -> (usize, usize) {
    let pred_counts = ngram_counts(pred, n);
    let gold_counts = ngram_counts(gold, n);
    let total: usize = pred_counts.values().sum();
    let clipped: usize = pred_counts
        .iter()
        .map(|(k, &c)| c.min(gold_counts.get(k).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

fn brevity_penalty(pred_len: usize, gold_len: usize) -> f64 {
    if pred_len >= gold_len {
        1.0
    } else if pred_len == 0 {
        0.0
    } else {
        (1.0 - gold_len as f64 / pred_len as f64).exp()
    }
}

/// Sentence BLEU-4: geometric mean of modified 1..4-gram precisions times
/// the brevity penalty. Unsmoothed: any order with zero matches gives 0.
pub fn bleu4(pred: &[Token], gold: &[Token]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (clipped, total) = clipped_counts(pred, gold, n);
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    brevity_penalty(pred.len(), gold.len()) * (log_sum / 4.0).exp()
}

/// Sentence BLEU-4 with +1 smoothing applied to the numerator and
/// denominator of zero-count orders only; keeps per-item diagnostics
/// finite for short or disjoint predictions.
pub fn bleu4_smoothed(pred: &[Token], gold: &[Token]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (clipped, total) = clipped_counts(pred, gold, n);
        let p = if clipped == 0 {
            (clipped + 1) as f64 / (total + 1) as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    brevity_penalty(pred.len(), gold.len()) * (log_sum / 4.0).exp()
}

/// ROUGE-4: clipped matched 4-gram count over the gold 4-gram count.
/// Undefined when the gold sequence has fewer than 4 tokens.
pub fn rouge4(pred: &[Token], gold: &[Token]) -> Result<f64> {
    let gold_counts = ngram_counts(gold, 4);
    let total: usize = gold_counts.values().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric(format!(
            "gold sequence of {} tokens has no 4-grams",
            gold.len()
        )));
    }
    let pred_counts = ngram_counts(pred, 4);
    let matched: usize = gold_counts
        .iter()
        .map(|(k, &c)| c.min(pred_counts.get(k).copied().unwrap_or(0)))
        .sum();
    Ok(matched as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRecord {
    pub image_id: String,
    pub matched: bool,
    pub matched_ws: bool,
    /// Smoothed sentence BLEU-4, for per-item diagnostics.
    pub bleu4: f64,
    /// None when the gold sequence has fewer than 4 tokens (item skipped
    /// from the corpus ROUGE aggregate).
    pub rouge4: Option<f64>,
    pub render_failed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Fraction of pairs whose renders are pixel-identical.
    pub match_frac: f64,
    /// Fraction identical after blank-column elimination.
    pub match_ws_frac: f64,
    /// Corpus-level BLEU-4 (unsmoothed, aggregated counts).
    pub bleu4: f64,
    /// Corpus-level ROUGE-4 (aggregated counts over defined items).
    pub rouge4: f64,
    pub items: Vec<ItemRecord>,
}

/// One evaluation pair: an id, the predicted tokens, the gold tokens.
pub type EvalPair = (String, Vec<Token>, Vec<Token>);

/// Evaluates all four metrics over a corpus of prediction/gold pairs.
pub fn evaluate_corpus(pairs: &[EvalPair], renderer: &dyn Renderer) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("evaluate_corpus on empty corpus".into()));
    }
    let mut items = Vec::with_capacity(pairs.len());
    let mut match_count = 0usize;
    let mut match_ws_count = 0usize;
    let mut bleu_clipped = [0usize; 4];
    let mut bleu_total = [0usize; 4];
    let mut pred_len_sum = 0usize;
    let mut gold_len_sum = 0usize;
    let mut rouge_matched = 0usize;
    let mut rouge_total = 0usize;

    for (id, pred, gold) in pairs {
        let gold_img = renderer.render(gold)?;
        let (matched, matched_ws, render_failed) = match renderer.render(pred) {
            Ok(pred_img) => (
                pred_img == gold_img,
                delete_blank_columns(&pred_img) == delete_blank_columns(&gold_img),
                false,
            ),
            Err(_) => (false, false, true),
        };
        match_count += usize::from(matched);
        match_ws_count += usize::from(matched_ws);

        for n in 1..=4 {
            let (clipped, total) = clipped_counts(pred, gold, n);
            bleu_clipped[n - 1] += clipped;
            bleu_total[n - 1] += total;
        }
        pred_len_sum += pred.len();
        gold_len_sum += gold.len();

        let item_rouge = match rouge4(pred, gold) {
            Ok(r) => {
                let gold_counts = ngram_counts(gold, 4);
                let total: usize = gold_counts.values().sum();
                let pred_counts = ngram_counts(pred, 4);
                let matched: usize = gold_counts
                    .iter()
                    .map(|(k, &c)| c.min(pred_counts.get(k).copied().unwrap_or(0)))
                    .sum();
                rouge_matched += matched;
                rouge_total += total;
                Some(r)
            }
            Err(_) => None,
        };

        items.push(ItemRecord {
            image_id: id.clone(),
            matched,
            matched_ws,
            bleu4: bleu4_smoothed(pred, gold),
            rouge4: item_rouge,
            render_failed,
        });
    }

    let corpus_bleu = {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..4 {
            if bleu_clipped[n] == 0 || bleu_total[n] == 0 {
                zero = true;
                break;
            }
            log_sum += (bleu_clipped[n] as f64 / bleu_total[n] as f64).ln();
        }
        if zero {
            0.0
        } else {
            brevity_penalty(pred_len_sum, gold_len_sum) * (log_sum / 4.0).exp()
        }
    };
    let corpus_rouge = if rouge_total == 0 {
        0.0
    } else {
        rouge_matched as f64 / rouge_total as f64
    };

    let n = pairs.len() as f64;
    Ok(MetricReport {
        match_frac: match_count as f64 / n,
        match_ws_frac: match_ws_count as f64 / n,
        bleu4: corpus_bleu,
        rouge4: corpus_rouge,
        items,
    })
}

impl MetricReport {
    /// Tab-separated one-line summary with a header row.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("match\tmatch_ws\tbleu4\trouge4\titems\n");
        writeln!(
            out,
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.match_frac,
            self.match_ws_frac,
            self.bleu4,
            self.rouge4,
            self.items.len()
        )
        .expect("write to string");
        out
    }

    /// One JSON object per item.
    pub fn items_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for item in &self.items {
            let line = serde_json::to_string(item)
                .map_err(|e| Error::InvalidInput(format!("serialize item: {}", e)))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_files(&self, summary_path: &Path, items_path: &Path) -> Result<()> {
        std::fs::write(summary_path, self.summary_tsv())?;
        std::fs::write(items_path, self.items_jsonl()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GlyphRenderer;
    use crate::token::tokenize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s).unwrap()
    }

    #[test]
    fn identical_sequences_match() {
        let r = GlyphRenderer;
        assert!(match_render(&toks("x^{2}+1"), &toks("x^{2}+1"), &r).unwrap());
        assert!(match_ws(&toks("x^{2}+1"), &toks("x^{2}+1"), &r).unwrap());
    }

    #[test]
    fn superscript_vs_subscript_do_not_match() {
        let r = GlyphRenderer;
        assert!(!match_render(&toks("x^{2}"), &toks("x_{2}"), &r).unwrap());
    }

    #[test]
    fn redundant_braces_match() {
        let r = GlyphRenderer;
        assert!(match_render(&toks("{x}+{1}"), &toks("x+1"), &r).unwrap());
    }

    #[test]
    fn unrenderable_prediction_counts_false() {
        let r = GlyphRenderer;
        assert!(!match_render(&toks("\\alpha"), &toks("x"), &r).unwrap());
        // Unrenderable gold is a hard error.
        assert!(match_render(&toks("x"), &toks("\\alpha"), &r).is_err());
    }

    #[test]
    fn blank_column_insertion_only_breaks_plain_match() {
        let r = GlyphRenderer;
        let gold_img = r.render(&toks("1+2")).unwrap();
        // Insert 3 blank columns mid-image.
        let at = gold_img.width / 2;
        let mut bits = Vec::new();
        for row in 0..gold_img.height {
            for c in 0..gold_img.width {
                if c == at {
                    bits.extend([false, false, false]);
                }
                bits.push(gold_img.get(row, c));
            }
        }
        let widened = BinaryMask {
            height: gold_img.height,
            width: gold_img.width + 3,
            bits,
        };
        assert_ne!(widened, gold_img);
        assert_eq!(delete_blank_columns(&widened), delete_blank_columns(&gold_img));
    }

    #[test]
    fn randomized_blank_columns_preserve_match_ws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = GlyphRenderer;
        for s in ["x+y", "\\frac{1}{2}", "a^{b}", "(z)"] {
            let img = r.render(&toks(s)).unwrap();
            let mut keep_equal = img.clone();
            // Insert blank columns at random offsets.
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..=keep_equal.width);
                let mut bits = Vec::new();
                for row in 0..keep_equal.height {
                    for c in 0..=keep_equal.width {
                        if c == at {
                            bits.push(false);
                        }
                        if c < keep_equal.width {
                            bits.push(keep_equal.get(row, c));
                        }
                    }
                }
                keep_equal = BinaryMask {
                    height: keep_equal.height,
                    width: keep_equal.width + 1,
                    bits,
                };
            }
            assert_eq!(
                delete_blank_columns(&keep_equal),
                delete_blank_columns(&img),
                "expression {:?}",
                s
            );
            assert_ne!(keep_equal, img);
        }
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let gold = toks("1+2=3");
        assert!((bleu4(&gold, &gold) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&toks("xyzabc"), &toks("123456")), 0.0);
        assert_eq!(bleu4(&[], &gold), 0.0);
    }

    #[test]
    fn bleu_hand_case() {
        // pred "a b c d e" vs gold "a b c d f":
        // p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = 1.
        let pred = toks("abcde");
        let gold = toks("abcdf");
        let want = (4.0f64 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 0.5).powf(0.25);
        assert!((bleu4(&pred, &gold) - want).abs() < 1e-9);
    }

    /// Brute-force n-gram counting oracle, independent of the HashMap path.
    fn bleu4_oracle(pred: &[Token], gold: &[Token]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let mut product = 1.0f64;
        for n in 1..=4 {
            if pred.len() < n {
                return 0.0;
            }
            let mut clipped = 0usize;
            let total = pred.len() - n + 1;
            let mut used = vec![false; if gold.len() >= n { gold.len() - n + 1 } else { 0 }];
            for i in 0..total {
                for j in 0..used.len() {
                    if used[j] {
                        continue;
                    }
                    if (0..n).all(|k| pred[i + k].text == gold[j + k].text) {
                        used[j] = true;
                        clipped += 1;
                        break;
                    }
                }
            }
            if clipped == 0 {
                return 0.0;
            }
            product *= clipped as f64 / total as f64;
        }
        let bp = if pred.len() >= gold.len() {
            1.0
        } else {
            (1.0 - gold.len() as f64 / pred.len() as f64).exp()
        };
        bp * product.powf(0.25)
    }

    fn rouge4_oracle(pred: &[Token], gold: &[Token]) -> Option<f64> {
        if gold.len() < 4 {
            return None;
        }
        let total = gold.len() - 3;
        let mut matched = 0usize;
        let mut used = vec![false; if pred.len() >= 4 { pred.len() - 3 } else { 0 }];
        for j in 0..total {
            for i in 0..used.len() {
                if used[i] {
                    continue;
                }
                if (0..4).all(|k| pred[i + k].text == gold[j + k].text) {
                    used[i] = true;
                    matched += 1;
                    break;
                }
            }
        }
        Some(matched as f64 / total as f64)
    }

    #[test]
    fn bleu_and_rouge_match_brute_force_oracles() {
        let alphabet = ["1", "2", "x", "+", "a"];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let len_p = rng.gen_range(0..12);
            let len_g = rng.gen_range(1..12);
            let pred: Vec<Token> = (0..len_p)
                .map(|_| Token::symbol(alphabet[rng.gen_range(0..alphabet.len())]))
                .collect();
            let gold: Vec<Token> = (0..len_g)
                .map(|_| Token::symbol(alphabet[rng.gen_range(0..alphabet.len())]))
                .collect();
            let got = bleu4(&pred, &gold);
            let want = bleu4_oracle(&pred, &gold);
            assert!(
                (got - want).abs() < 1e-9,
                "bleu {:?} vs {:?}: {} vs {}",
                pred.iter().map(|t| &t.text).collect::<Vec<_>>(),
                gold.iter().map(|t| &t.text).collect::<Vec<_>>(),
                got,
                want
            );
            match (rouge4(&pred, &gold), rouge4_oracle(&pred, &gold)) {
                (Ok(got), Some(want)) => assert!((got - want).abs() < 1e-9),
                (Err(_), None) => {}
                (a, b) => panic!("rouge disagreement: {:?} vs {:?}", a, b),
            }
        }
    }

    #[test]
    fn rouge_trivial_cases() {
        let gold = toks("1+2=3");
        assert!((rouge4(&gold, &gold).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge4(&toks("xyzabc"), &gold).unwrap(), 0.0);
        assert!(matches!(
            rouge4(&gold, &toks("ab")),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn corpus_report_all_correct() {
        let r = GlyphRenderer;
        let pairs: Vec<EvalPair> = ["1+2=3", "x^{2}", "\\frac{a}{b}+c"]
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("img{}", i), toks(s), toks(s)))
            .collect();
        let report = evaluate_corpus(&pairs, &r).unwrap();
        assert_eq!(report.match_frac, 1.0);
        assert_eq!(report.match_ws_frac, 1.0);
        assert!((report.bleu4 - 1.0).abs() < 1e-12);
        assert!((report.rouge4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_with_known_corruption_rate() {
        let r = GlyphRenderer;
        let expressions = [
            "1+2", "x+y", "a-b", "3=z", "x^{2}", "y_{0}", "\\frac{1}{2}", "(a)", "b+4", "c-5",
        ];
        let mut pairs: Vec<EvalPair> = Vec::new();
        for round in 0..5 {
            for (i, s) in expressions.iter().enumerate() {
                let gold = toks(s);
                // Corrupt exactly two items in ten per round: 10 of 50.
                let pred = if i == round * 2 % 10 || i == (round * 2 + 1) % 10 {
                    toks("9")
                } else {
                    gold.clone()
                };
                pairs.push((format!("r{}i{}", round, i), pred, gold));
            }
        }
        let report = evaluate_corpus(&pairs, &r).unwrap();
        assert!((report.match_frac - 0.8).abs() < 1e-12);
        assert!(report.match_frac <= report.match_ws_frac);
    }

    #[test]
    fn match_implies_match_ws_on_corrupted_corpus() {
        let r = GlyphRenderer;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let atoms = ["1", "2", "x", "y", "+"];
        for _ in 0..50 {
            let len = rng.gen_range(1..6);
            let gold_s: String = (0..len).map(|_| atoms[rng.gen_range(0..atoms.len())]).collect();
            let corrupt = rng.gen_bool(0.4);
            let pred_s = if corrupt {
                format!("{}3", &gold_s)
            } else {
                gold_s.clone()
            };
            let matched = match_render(&toks(&pred_s), &toks(&gold_s), &r).unwrap();
            let matched_ws = match_ws(&toks(&pred_s), &toks(&gold_s), &r).unwrap();
            assert!(!matched || matched_ws, "match must imply match_ws");
        }
    }

    #[test]
    fn report_files_round_trip(){
        let r = GlyphRenderer;
        let pairs: Vec<EvalPair> = vec![("a".into(), toks("1+2=3"), toks("1+2=3"))];
        let report = evaluate_corpus(&pairs, &r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = dir.path().join("summary.tsv");
        let items = dir.path().join("items.jsonl");
        report.write_files(&summary, &items).unwrap();
        let text = std::fs::read_to_string(&items).unwrap();
        let parsed: ItemRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(parsed.matched);
        assert_eq!(parsed.image_id, "a");
    }
}
