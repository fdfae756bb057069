//! Sequential vs parallel throughput on the data pipeline. Build with
//! `--no-default-features` to measure the purely sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stylebert::encoders::{encode_sentence, EncodedSequence, FeatureAlphabets, Vocab};
use stylebert::feature_tables::{parse_dictionary_str, DictKind, FeatureDictionary};
use stylebert::masking::{mask_statistics, MaskingConfig, MaskingStrategy};
use stylebert::util::{derive_rng, ordered_map};

use rand::seq::SliceRandom;

fn assets() -> (FeatureDictionary, FeatureAlphabets, Vec<char>) {
    let letters = "bdfghklmnp".chars().collect::<Vec<_>>();
    let radicals = ["囗", "女", "子", "日", "月", "王", "口", "贝", "凡"];
    let mut pinyin = String::new();
    let mut wubi = String::new();
    let mut chaizi = String::new();
    let mut chars = Vec::new();
    for i in 0..200usize {
        let c = char::from_u32(0x4E00 + i as u32).unwrap();
        chars.push(c);
        pinyin.push_str(&format!(
            "{c}\t{}a{}{}\n",
            letters[i % 10],
            letters[(i / 2) % 10],
            i % 5
        ));
        wubi.push_str(&format!("{c}\t{}{}\n", letters[i % 10], letters[(i + 3) % 10]));
        chaizi.push_str(&format!(
            "{c}\t{} {}\n",
            radicals[i % 9],
            radicals[(i + 4) % 9]
        ));
    }
    let p = parse_dictionary_str(&pinyin, DictKind::Pinyin, "p").unwrap();
    let w = parse_dictionary_str(&wubi, DictKind::Wubi, "w").unwrap();
    let c = parse_dictionary_str(&chaizi, DictKind::Chaizi, "c").unwrap();
    let dict = FeatureDictionary::build(&p, &w, &c);
    let alphabets = FeatureAlphabets::from_dictionary(&dict);
    (dict, alphabets, chars)
}

fn corpus(chars: &[char], lines: usize, len: usize) -> Vec<String> {
    let mut rng = derive_rng(0, &["bench-corpus"], &[]);
    (0..lines)
        .map(|_| (0..len).map(|_| chars.choose(&mut rng).unwrap()).collect())
        .collect()
}

fn bench_encoding(c: &mut Criterion) {
    let (dict, alphabets, chars) = assets();
    let lines = corpus(&chars, 2000, 30);
    let vocab = Vocab::build(&lines, 1).unwrap();

    let mut group = c.benchmark_group("encode_corpus");
    for threads in [1usize, 0] {
        let label = if threads == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            b.iter(|| {
                ordered_map(&lines, t, |_, line| {
                    let mut trunc = 0;
                    encode_sentence(
                        line, &vocab, &dict, &alphabets, 32, 8, None, &mut trunc,
                    )
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_mask_statistics(c: &mut Criterion) {
    let (dict, alphabets, chars) = assets();
    let lines = corpus(&chars, 2000, 30);
    let vocab = Vocab::build(&lines, 1).unwrap();
    let sequences: Vec<(EncodedSequence, Vec<char>)> = lines
        .iter()
        .map(|line| {
            let mut trunc = 0;
            let seq = encode_sentence(
                line, &vocab, &dict, &alphabets, 32, 8, None, &mut trunc,
            )
            .unwrap();
            (seq, line.chars().collect())
        })
        .collect();
    let config = MaskingConfig { strategy: MaskingStrategy::CM, ..MaskingConfig::default() };

    let mut group = c.benchmark_group("mask_statistics");
    for threads in [1usize, 0] {
        let label = if threads == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            b.iter(|| {
                mask_statistics(&sequences, &vocab, &dict, &alphabets, None, &config, t)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_encoding, bench_mask_statistics);
criterion_main!(benches);
