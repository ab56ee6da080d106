//! Regenerates `fixtures/deployment.json` and `fixtures/empty.json`.
//!
//! The deployment fixture is a synthesized semester: six sections of 219
//! group sessions, 7516 AI replies (432 of them in the first section, before
//! labeling existed), 336 labeled replies carrying 366 labels, 614 TA
//! reviews and TA chat in 61 sessions. The expected block is computed here
//! from the construction, independently of the hub.
//!
//! cargo run -p tutorhub --example gen_fixtures

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tutorhub::model::{ReviewState, StudentFeedbackLabel};
use tutorhub::sim::replay::{Expected, FixtureGroup, FixtureSection, Step};
use tutorhub::sim::scenario::ReviewKind;
use tutorhub::sim::Fixture;

const SECTIONS: usize = 6;
const SESSIONS_PER_SECTION: u32 = 219;
const UNLABELED_SECTION_REPLIES: usize = 432;
const LABELED_SECTION_REPLIES: usize = 7084;
const LABELED_REPLIES: usize = 336;
const LABEL_TALLY: [(StudentFeedbackLabel, usize); 4] = [
    (StudentFeedbackLabel::Helpful, 156),
    (StudentFeedbackLabel::Unhelpful, 129),
    (StudentFeedbackLabel::TooMuchHelp, 39),
    (StudentFeedbackLabel::Incorrect, 42),
];
const REVIEW_TALLY: [(ReviewKind, ReviewState, usize); 3] = [
    (ReviewKind::Read, ReviewState::Read, 423),
    (ReviewKind::Endorse, ReviewState::Endorsed, 188),
    (ReviewKind::Edit, ReviewState::Edited, 3),
];
const TA_CHAT_SESSIONS: usize = 61;

/// One AI reply: (section, session, index within the session).
type Reply = (usize, usize, usize);

struct Session {
    students: u32,
    replies: usize,
    labels: Vec<(u32, usize, StudentFeedbackLabel)>,
    reviews: Vec<(usize, ReviewKind)>,
    ta_chat: bool,
}

fn spread(rng: &mut ChaCha8Rng, total: usize, sessions: usize) -> Vec<usize> {
    let mut counts = vec![0; sessions];
    for _ in 0..total {
        counts[rng.gen_range(0..sessions)] += 1;
    }
    counts
}

fn main() -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ab1e5);
    let n = SESSIONS_PER_SECTION as usize;

    let mut sections: Vec<Vec<Session>> = (0..SECTIONS)
        .map(|s| {
            let total = if s == 0 {
                UNLABELED_SECTION_REPLIES
            } else {
                LABELED_SECTION_REPLIES / (SECTIONS - 1) + usize::from(s <= LABELED_SECTION_REPLIES % (SECTIONS - 1))
            };
            spread(&mut rng, total, n)
                .into_iter()
                .map(|replies| Session {
                    students: rng.gen_range(3..=7),
                    replies,
                    labels: Vec::new(),
                    reviews: Vec::new(),
                    ta_chat: false,
                })
                .collect()
        })
        .collect();

    let all: Vec<Reply> = sections
        .iter()
        .enumerate()
        .flat_map(|(s, sessions)| {
            sessions
                .iter()
                .enumerate()
                .flat_map(move |(g, session)| (0..session.replies).map(move |i| (s, g, i)))
        })
        .collect();
    assert_eq!(all.len(), UNLABELED_SECTION_REPLIES + LABELED_SECTION_REPLIES);

    // Labels: distinct replies from labeled sections; the surplus of labels
    // over replies goes to second labels by a different student.
    let mut labels: Vec<StudentFeedbackLabel> = LABEL_TALLY
        .iter()
        .flat_map(|(label, count)| std::iter::repeat_n(*label, *count))
        .collect();
    labels.shuffle(&mut rng);
    let doubles = labels.len() - LABELED_REPLIES;
    let labelable: Vec<Reply> = all.iter().copied().filter(|r| r.0 != 0).collect();
    let chosen: Vec<Reply> = labelable.choose_multiple(&mut rng, LABELED_REPLIES).copied().collect();
    let mut next = labels.into_iter();
    for (k, &(s, g, i)) in chosen.iter().enumerate() {
        let session = &mut sections[s][g];
        let first = rng.gen_range(0..session.students);
        session.labels.push((first, i, next.next().expect("enough labels")));
        if k < doubles {
            let second = (first + rng.gen_range(1..session.students)) % session.students;
            session.labels.push((second, i, next.next().expect("enough labels")));
        }
    }
    assert!(next.next().is_none());

    let mut actions: Vec<ReviewKind> = REVIEW_TALLY
        .iter()
        .flat_map(|(kind, _, count)| std::iter::repeat_n(*kind, *count))
        .collect();
    actions.shuffle(&mut rng);
    for (&(s, g, i), kind) in all.choose_multiple(&mut rng, actions.len()).zip(actions) {
        sections[s][g].reviews.push((i, kind));
    }

    let slots: Vec<(usize, usize)> = (0..SECTIONS).flat_map(|s| (0..n).map(move |g| (s, g))).collect();
    for &(s, g) in slots.choose_multiple(&mut rng, TA_CHAT_SESSIONS) {
        sections[s][g].ta_chat = true;
    }

    let fixture_sections: Vec<FixtureSection> = sections
        .iter()
        .enumerate()
        .map(|(s, sessions)| FixtureSection {
            id: format!("week-{}", s + 1),
            labels_enabled: s != 0,
            groups: sessions
                .iter()
                .enumerate()
                .map(|(g, session)| {
                    let mut script = Vec::new();
                    let mut asked = 0;
                    while asked < session.replies {
                        let count = rng.gen_range(1..=3).min(session.replies - asked);
                        script.push(Step::Ask {
                            student: rng.gen_range(0..session.students),
                            count: count as u32,
                        });
                        asked += count;
                    }
                    let mut labels = session.labels.clone();
                    labels.sort_by_key(|l| (l.1, l.0));
                    script.extend(labels.into_iter().map(|(student, ai, label)| Step::Label { student, ai, label }));
                    let mut reviews = session.reviews.clone();
                    reviews.sort_by_key(|r| r.0);
                    script.extend(reviews.into_iter().map(|(ai, action)| Step::Review {
                        ai,
                        action,
                        body: (action == ReviewKind::Edit)
                            .then(|| "Good question. Start from the first failing test and compare line by line.".into()),
                    }));
                    if session.ta_chat {
                        script.push(Step::TaChat {
                            body: "How is your group doing? Let me know if you want to talk it through.".into(),
                        });
                        if rng.gen_bool(0.5) {
                            script.push(Step::StudentTaChat {
                                student: rng.gen_range(0..session.students),
                                body: "We are stuck on the second problem.".into(),
                            });
                        }
                    }
                    FixtureGroup {
                        group: g as u32 + 1,
                        students: session.students,
                        script,
                    }
                })
                .collect(),
        })
        .collect();

    let ai_messages = all.len() as u64;
    let reviewed = REVIEW_TALLY.iter().map(|r| r.2 as u64).sum::<u64>();
    let expected = Expected {
        sessions: (SECTIONS * n) as u64,
        ai_messages,
        labelable_ai_messages: LABELED_SECTION_REPLIES as u64,
        labeled_messages: LABELED_REPLIES as u64,
        labels: LABEL_TALLY.iter().map(|(l, c)| (*l, *c as u64)).collect(),
        reviewed_messages: reviewed,
        reviews: REVIEW_TALLY.iter().map(|(_, s, c)| (*s, *c as u64)).collect::<BTreeMap<_, _>>(),
        sessions_with_ta_chat: TA_CHAT_SESSIONS as u64,
        reviewed_fraction: Some(reviewed as f64 / ai_messages as f64),
        label_rate: Some(LABELED_REPLIES as f64 / LABELED_SECTION_REPLIES as f64),
    };
    let deployment = Fixture {
        name: "deployment".into(),
        description: "Synthesized semester of six sections with fixed label and review tallies.".into(),
        sections: fixture_sections,
        expected,
    };
    let empty = Fixture {
        name: "empty".into(),
        description: "No sessions at all.".into(),
        sections: Vec::new(),
        expected: Expected::default(),
    };

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir)?;
    for (name, fixture) in [("deployment.json", &deployment), ("empty.json", &empty)] {
        std::fs::write(dir.join(name), render(fixture))?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

/// Pretty JSON with one group per line, so diffs stay readable.
fn render(fixture: &Fixture) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!("  \"name\": {},\n", json(&fixture.name)));
    out.push_str(&format!("  \"description\": {},\n", json(&fixture.description)));
    out.push_str(&format!("  \"expected\": {},\n", json(&fixture.expected)));
    out.push_str("  \"sections\": [");
    for (i, section) in fixture.sections.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&format!(
            "    {{\"id\": {}, \"labels_enabled\": {}, \"groups\": [\n",
            json(&section.id),
            section.labels_enabled
        ));
        let groups: Vec<String> = section.groups.iter().map(|g| format!("      {}", json(g))).collect();
        out.push_str(&groups.join(",\n"));
        out.push_str("\n    ]}");
    }
    out.push_str(if fixture.sections.is_empty() { "]\n}\n" } else { "\n  ]\n}\n" });
    out
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("fixture types serialize")
}
